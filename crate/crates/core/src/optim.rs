//! Adam with a linear warmup followed by cosine decay.

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3.5e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.0 }
    }
}

/// Step size at `step` of `total`: linear ramp over the first
/// `warmup_frac · total` steps, then a half cosine down to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub total: usize,
}

impl Schedule {
    pub fn lr(&self, step: usize) -> f64 {
        let warm = (self.warmup_frac * self.total as f64).round() as usize;
        if step < warm {
            return self.base_lr * (step + 1) as f64 / warm as f64;
        }
        let span = self.total.saturating_sub(warm).max(1);
        let t = ((step - warm) as f64 / span as f64).min(1.0);
        0.5 * self.base_lr * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

/// First and second moment estimates of every optimized parameter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    pub ids: Vec<ParamId>,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    /// Updates applied so far.
    pub t: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, ids: Vec<ParamId>, config: AdamConfig) -> Result<Self> {
        if !(0.0..1.0).contains(&config.beta1) || !(0.0..1.0).contains(&config.beta2) {
            return Err(Error::Config(format!(
                "Adam betas must lie in [0, 1), got ({}, {})",
                config.beta1, config.beta2
            )));
        }
        let m: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.value(id).dims())).collect();
        let v = m.clone();
        Ok(Self { config, ids, m, v, t: 0 })
    }

    /// Applies one update with step size `lr` from the gradients in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps, weight_decay, .. } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for (i, &id) in self.ids.iter().enumerate() {
            let g = store.grad(id).clone();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let w = store.value_mut(id).data_mut();
            for j in 0..w.len() {
                let gj = g.data()[j] + weight_decay * w[j];
                m[j] = beta1 * m[j] + (1.0 - beta1) * gj;
                v[j] = beta2 * v[j] + (1.0 - beta2) * gj * gj;
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
    }
}
