//! Adam with bias correction and the linear learning-rate decay schedule.

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::mat::Mat;

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub base_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Schedule horizon in epochs for the linear decay.
    pub horizon: usize,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { base_lr: 1e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, horizon: 100 }
    }
}

/// Optimizer state: per-parameter first/second moments plus the step count.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
    pub step: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let m = store
            .iter()
            .map(|(_, p)| Mat::zeros(p.value.rows(), p.value.cols()))
            .collect::<Vec<_>>();
        let v = m.clone();
        Adam { config, m, v, step: 0 }
    }

    /// One bias-corrected update of every parameter. `grads` is indexed like
    /// the store. A non-finite gradient aborts with a training fault.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], lr: f64) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::invalid("gradient list does not match parameter count"));
        }
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                let name = store
                    .iter()
                    .nth(i)
                    .map(|(_, p)| p.name.clone())
                    .unwrap_or_default();
                return Err(Error::TrainingFault(format!(
                    "non-finite gradient for parameter '{name}' at step {}",
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let b1 = self.config.beta1;
        let b2 = self.config.beta2;
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        for (pi, g) in grads.iter().enumerate() {
            let m = &mut self.m[pi];
            let v = &mut self.v[pi];
            let theta = store.value_mut(crate::autodiff::ParamId(pi));
            for ((mv, vv), (tv, &gv)) in m
                .data_mut()
                .iter_mut()
                .zip(v.data_mut().iter_mut())
                .zip(theta.data_mut().iter_mut().zip(g.data()))
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *tv -= lr * mhat / (vhat.sqrt() + self.config.eps);
            }
        }
        Ok(())
    }
}

/// `base * (1 - epoch/total)`, clamped at zero.
pub fn linear_decay_lr(base: f64, epoch: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::invalid("schedule horizon must be positive"));
    }
    Ok((base * (1.0 - epoch as f64 / total as f64)).max(0.0))
}
