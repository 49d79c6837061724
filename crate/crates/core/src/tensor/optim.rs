use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self { lr: 2e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-12 }
    }
}

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|p| Tensor::zeros(p.value().shape())).collect();
        Self { config, step: 0, m: zeros(), v: zeros() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn moments(&self) -> (&[Tensor], &[Tensor]) {
        (&self.m, &self.v)
    }

    pub fn restore(&mut self, step: u64, m: Vec<Tensor>, v: Vec<Tensor>) -> Result<()> {
        if m.len() != self.m.len() || v.len() != self.v.len() {
            return Err(Error::Checkpoint("optimizer state size mismatch".into()));
        }
        for ((a, b), c) in m.iter().zip(&self.m).zip(&v) {
            if a.shape() != b.shape() || c.shape() != b.shape() {
                return Err(Error::Checkpoint("optimizer moment shape mismatch".into()));
            }
        }
        self.step = step;
        self.m = m;
        self.v = v;
        Ok(())
    }

    /// One update from the store's accumulated gradients. Nothing is
    /// modified when any gradient is non-finite.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        if let Some(p) = store.iter().find(|p| !p.grad().all_finite()) {
            return Err(Error::OptimizerAbort { param: p.name().to_string() });
        }
        let grads = store.grads();
        self.apply(store, &grads)
    }

    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        if grads.len() != store.len() {
            return Err(Error::invalid("gradient count differs from parameter count"));
        }
        for (p, g) in store.iter().zip(grads) {
            if !g.all_finite() {
                return Err(Error::OptimizerAbort { param: p.name().to_string() });
            }
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            let g = grads[k].data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            let w = store.value_mut(id).data_mut();
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                w[i] -= c.lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * w[i]);
            }
        }
        Ok(())
    }
}
