//! Periodicity task construction: batch partitioning into daily/weekly/
//! monthly tasks, sinusoidal positional encodings, and the learnable
//! meta-positional encoding η.

use crate::data::WindowSample;
use crate::error::{Result, SsmtError};
use crate::tensor::Tensor;
use std::f64::consts::PI;

/// Period multiplier for one task: V = 1 daily, 7 weekly, 30 monthly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PeriodSpec {
    pub period_multiplier: usize,
    pub samples_per_hour: usize,
}

impl PeriodSpec {
    pub fn new(period_multiplier: usize, samples_per_hour: usize) -> Self {
        PeriodSpec { period_multiplier, samples_per_hour }
    }

    /// Fundamental period in samples: 24·sph·V.
    pub fn period_samples(&self) -> usize {
        24 * self.samples_per_hour * self.period_multiplier
    }
}

/// Positional encoding for a window starting at absolute index `t_start`.
/// Entry j uses pos = t_start + j and angle 2π·pos/(24·sph·V); even
/// positions take sin, odd take cos.
pub fn periodic_encoding(t_start: usize, t_in: usize, spec: &PeriodSpec) -> Tensor {
    let period = spec.period_samples() as f64;
    let data = (0..t_in)
        .map(|j| {
            let pos = t_start + j;
            let theta = 2.0 * PI * pos as f64 / period;
            if pos % 2 == 0 {
                theta.sin()
            } else {
                theta.cos()
            }
        })
        .collect();
    Tensor::new(1, t_in, data)
}

/// The learnable meta-positional encoding: a 1×T scale row and an N×T
/// basis, combined entrywise with the scale broadcast over nodes. The scale
/// is node-agnostic and transfers across cities; the basis is city-private.
#[derive(Debug, Clone)]
pub struct MetaPe {
    pub pe_scale: Tensor,
    pub pe_basis: Tensor,
}

impl MetaPe {
    /// η[n,t] = pe_scale[t] · pe_basis[n,t].
    pub fn eta(&self) -> Tensor {
        let (n, t) = self.pe_basis.shape();
        let mut out = Tensor::zeros(n, t);
        for r in 0..n {
            for c in 0..t {
                out.set(r, c, self.pe_scale.at(0, c) * self.pe_basis.at(r, c));
            }
        }
        out
    }
}

/// A positional-encoded sub-batch with support/query halves.
#[derive(Debug, Clone)]
pub struct Task {
    pub period: PeriodSpec,
    pub support: Vec<WindowSample>,
    pub query: Vec<WindowSample>,
}

/// Contiguous equal split of an ordered batch into `k` parts.
pub fn partition_batch(batch: &[WindowSample], k: usize) -> Result<Vec<Vec<WindowSample>>> {
    if k == 0 || batch.len() % k != 0 {
        return Err(SsmtError::Config(format!(
            "batch of {} not divisible into {k} tasks",
            batch.len()
        )));
    }
    let part = batch.len() / k;
    Ok(batch.chunks(part).map(|c| c.to_vec()).collect())
}

/// Build one task per period spec: contiguous equal parts of the batch in
/// order, each split into equal support (first half) and query (second
/// half) sets. Inputs stay raw here; encodings are added at forward time so
/// η can participate in the tape.
pub fn build_tasks(batch: &[WindowSample], specs: &[PeriodSpec]) -> Result<Vec<Task>> {
    if batch.len() % (2 * specs.len()) != 0 {
        return Err(SsmtError::Config(format!(
            "batch of {} not divisible into {} tasks with equal support/query halves",
            batch.len(),
            specs.len()
        )));
    }
    let parts = partition_batch(batch, specs.len())?;
    Ok(parts
        .into_iter()
        .zip(specs)
        .map(|(part, &period)| {
            let half = part.len() / 2;
            Task {
                period,
                support: part[..half].to_vec(),
                query: part[half..].to_vec(),
            }
        })
        .collect())
}

/// Window input with the task's positional encoding added (broadcast over
/// nodes), and optionally η. Value-level counterpart of the tape-side
/// encoding used in training.
pub fn encode_window(
    x: &Tensor,
    t_start: usize,
    spec: &PeriodSpec,
    eta: Option<&Tensor>,
) -> Tensor {
    let (n, t_in) = x.shape();
    let pe = periodic_encoding(t_start, t_in, spec);
    let mut out = x.clone();
    for r in 0..n {
        for c in 0..t_in {
            let mut v = out.at(r, c) + pe.at(0, c);
            if let Some(e) = eta {
                v += e.at(r, c);
            }
            out.set(r, c, v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_batch(count: usize, n: usize, t_in: usize, t_out: usize) -> Vec<WindowSample> {
        (0..count)
            .map(|i| WindowSample {
                x: Tensor::full(n, t_in, i as f64),
                y: Tensor::full(n, t_out, i as f64),
                t_start: i,
            })
            .collect()
    }

    #[test]
    fn pe_at_zero() {
        let spec = PeriodSpec::new(1, 12);
        let pe = periodic_encoding(0, 1, &spec);
        assert_eq!(pe.at(0, 0), 0.0);
    }

    #[test]
    fn pe_direct_evaluation() {
        // sph=12, V=1, pos=72 (even): sin(2π·72/288) = sin(π/2) = 1
        let spec = PeriodSpec::new(1, 12);
        let pe = periodic_encoding(72, 1, &spec);
        assert!((pe.at(0, 0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn pe_periodicity() {
        for &v in &[1usize, 7, 30] {
            for &sph in &[6usize, 12] {
                let spec = PeriodSpec::new(v, sph);
                let period = spec.period_samples();
                for pos in [0usize, 5, 123, 4567] {
                    // matching parity requires an even period, which 24·sph·V is
                    let a = periodic_encoding(pos, 1, &spec);
                    let b = periodic_encoding(pos + period, 1, &spec);
                    assert!((a.at(0, 0) - b.at(0, 0)).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn partition_contiguous_thirds() {
        let batch = toy_batch(12, 2, 3, 2);
        let parts = partition_batch(&batch, 3).unwrap();
        assert_eq!(parts.len(), 3);
        let starts: Vec<Vec<usize>> = parts
            .iter()
            .map(|p| p.iter().map(|w| w.t_start).collect())
            .collect();
        assert_eq!(starts[0], vec![0, 1, 2, 3]);
        assert_eq!(starts[1], vec![4, 5, 6, 7]);
        assert_eq!(starts[2], vec![8, 9, 10, 11]);
        // union, re-sorted, is the original batch; parts are disjoint
        let mut all: Vec<usize> = starts.concat();
        all.sort_unstable();
        assert_eq!(all, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn build_tasks_split_arithmetic() {
        let batch = toy_batch(12, 2, 3, 2);
        let specs = [
            PeriodSpec::new(1, 12),
            PeriodSpec::new(7, 12),
            PeriodSpec::new(30, 12),
        ];
        let tasks = build_tasks(&batch, &specs).unwrap();
        assert_eq!(tasks.len(), 3);
        for task in &tasks {
            assert_eq!(task.support.len(), 2);
            assert_eq!(task.query.len(), 2);
            // both halves temporally ordered
            assert!(task.support[0].t_start < task.support[1].t_start);
            assert!(task.query[0].t_start < task.query[1].t_start);
            assert!(task.support[1].t_start < task.query[0].t_start);
        }
    }

    #[test]
    fn encoding_is_additive() {
        let spec = PeriodSpec::new(7, 6);
        let x = Tensor::full(3, 4, 2.5);
        let enc = encode_window(&x, 10, &spec, None);
        let pe = periodic_encoding(10, 4, &spec);
        for r in 0..3 {
            for c in 0..4 {
                assert!((enc.at(r, c) - x.at(r, c) - pe.at(0, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eta_identity_and_annihilation() {
        let basis = Tensor::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let ones = MetaPe {
            pe_scale: Tensor::full(1, 2, 1.0),
            pe_basis: basis.clone(),
        };
        assert_eq!(ones.eta(), basis);
        let zeros = MetaPe {
            pe_scale: Tensor::zeros(1, 2),
            pe_basis: basis.clone(),
        };
        assert_eq!(zeros.eta(), Tensor::zeros(2, 2));
        let scaled = MetaPe {
            pe_scale: Tensor::new(1, 2, vec![2.0, 3.0]),
            pe_basis: Tensor::full(2, 2, 1.0),
        };
        assert_eq!(scaled.eta().row(0), Tensor::new(1, 2, vec![2.0, 3.0]));
    }
}
