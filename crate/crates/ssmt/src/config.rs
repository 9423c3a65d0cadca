//! Training/run configuration with JSON serialization and validation.

use crate::error::{Result, SsmtError};
use crate::losses::LossWeights;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskConfig {
    /// Period multipliers, one task each; the default three are daily,
    /// weekly, monthly.
    pub periods: Vec<usize>,
    pub enable_mpe: bool,
    pub enable_pe: bool,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig { periods: vec![1, 7, 30], enable_mpe: true, enable_pe: true }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub inner_lr: f64,
    pub outer_lr: f64,
    pub inner_steps: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub mem_items: usize,
    pub embed_dim: usize,
    pub tau: f64,
    pub t_in: usize,
    pub t_out: usize,
    pub hidden: usize,
    pub samples_per_hour: usize,
    pub window_stride: usize,
    pub finetune_lr: f64,
    pub finetune_epochs: usize,
    /// Fine-tune range length for the few-shot split, in days.
    pub few_shot_days: usize,
    pub loss: LossWeights,
    pub tasks: TaskConfig,
    /// Ablation: disable the memory bank (ξ from E·Eᵀ, P = E).
    pub no_memory: bool,
    /// Sample the graph hard (binarized) during training too.
    pub hard_graph: bool,
    pub horizons: Vec<usize>,
    /// Window stride used when evaluating on the test range.
    pub eval_stride: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            inner_lr: 0.01,
            outer_lr: 0.001,
            inner_steps: 1,
            batch_size: 60,
            max_epochs: 100,
            mem_items: 20,
            embed_dim: 64,
            tau: 0.5,
            t_in: 12,
            t_out: 12,
            hidden: 32,
            samples_per_hour: 12,
            window_stride: 1,
            finetune_lr: 0.001,
            finetune_epochs: 5,
            few_shot_days: 7,
            loss: LossWeights::default(),
            tasks: TaskConfig::default(),
            no_memory: false,
            hard_graph: false,
            horizons: vec![1, 3, 6],
            eval_stride: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("inner_lr", self.inner_lr),
            ("outer_lr", self.outer_lr),
            ("finetune_lr", self.finetune_lr),
            ("tau", self.tau),
        ];
        for (name, v) in positive {
            if v <= 0.0 {
                return Err(SsmtError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.tasks.periods.is_empty() || self.tasks.periods.len() > 3 {
            return Err(SsmtError::Config(
                "tasks.periods must name between 1 and 3 periods".into(),
            ));
        }
        for p in &self.tasks.periods {
            if ![1, 7, 30].contains(p) {
                return Err(SsmtError::Config(format!(
                    "unsupported period multiplier {p} (allowed: 1, 7, 30)"
                )));
            }
        }
        let div = 2 * self.tasks.periods.len();
        if self.batch_size % div != 0 {
            return Err(SsmtError::Config(format!(
                "batch_size {} must be divisible by {div} ({} tasks × support/query halves)",
                self.batch_size,
                self.tasks.periods.len()
            )));
        }
        for &h in &self.horizons {
            if h < 1 || h > self.t_out {
                return Err(SsmtError::Config(format!(
                    "horizon {h} outside [1, {}]",
                    self.t_out
                )));
            }
        }
        if self.mem_items < 2 {
            return Err(SsmtError::Config("mem_items must be at least 2".into()));
        }
        Ok(())
    }

    /// Stable hash of the canonical JSON form, for report provenance.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(json.as_bytes());
        hex_prefix(&digest, 16)
    }
}

pub fn hex_prefix(bytes: &[u8], chars: usize) -> String {
    let mut s = String::with_capacity(chars);
    for b in bytes {
        use std::fmt::Write;
        write!(s, "{b:02x}").unwrap();
        if s.len() >= chars {
            break;
        }
    }
    s.truncate(chars);
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid_and_match_training_setup() {
        let cfg = TrainConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.inner_lr, 0.01);
        assert_eq!(cfg.outer_lr, 0.001);
        assert_eq!(cfg.batch_size, 60);
        assert_eq!(cfg.max_epochs, 100);
        assert_eq!(cfg.mem_items, 20);
        assert_eq!(cfg.embed_dim, 64);
        assert_eq!(cfg.loss.c1, 0.5);
        assert_eq!(cfg.loss.c2, 0.2);
        assert_eq!(cfg.loss.c3, 0.3);
    }

    #[test]
    fn indivisible_batch_size_rejected() {
        let cfg = TrainConfig { batch_size: 10, ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn horizon_bounds_checked() {
        let cfg = TrainConfig { horizons: vec![13], ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_stable_and_sensitive() {
        let a = TrainConfig::default();
        let b = TrainConfig::default();
        assert_eq!(a.hash(), b.hash());
        let c = TrainConfig { tau: 0.7, ..Default::default() };
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn json_roundtrip() {
        let cfg = TrainConfig { hidden: 8, ..Default::default() };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: TrainConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back.hidden, 8);
        assert_eq!(cfg.hash(), back.hash());
    }
}
