//! First-order optimizers over named parameter collections.

use crate::error::{Result, SsmtError};
use crate::tensor::Tensor;
use std::collections::BTreeMap;

pub type GradMap = BTreeMap<String, Tensor>;

/// One plain gradient-descent step: p ← p − lr·g. Every parameter must have
/// a gradient; the inner loop is total over the adapted set.
pub fn sgd_step(params: &mut [(String, Tensor)], grads: &GradMap, lr: f64) -> Result<()> {
    for (name, p) in params.iter_mut() {
        let g = grads.get(name).ok_or_else(|| {
            SsmtError::Config(format!("missing gradient for parameter `{name}`"))
        })?;
        p.check_same_shape(g, "sgd_step")?;
        *p = p.zip(g, |a, b| a - lr * b);
    }
    Ok(())
}

/// Adam accumulator state for a fixed parameter set.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    lr: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl OptimizerState {
    pub fn new(lr: f64) -> Self {
        OptimizerState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor> {
        self.moments.get(name).map(|(_, v)| v)
    }

    /// Bias-corrected Adam update; moments are created lazily at zero.
    pub fn adam_step(&mut self, params: &mut [(String, Tensor)], grads: &GradMap) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let (lr, beta1, beta2, eps) = (self.lr, self.beta1, self.beta2, self.epsilon);
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let g = grads.get(name).ok_or_else(|| {
                SsmtError::Config(format!("missing gradient for parameter `{name}`"))
            })?;
            p.check_same_shape(g, "adam_step")?;
            let (r, c) = p.shape();
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(r, c), Tensor::zeros(r, c)));
            *m = m.zip(g, |mi, gi| beta1 * mi + (1.0 - beta1) * gi);
            *v = v.zip(g, |vi, gi| beta2 * vi + (1.0 - beta2) * gi * gi);
            for k in 0..p.len() {
                let mhat = m.data()[k] / bc1;
                let vhat = v.data()[k] / bc2;
                p.data_mut()[k] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
