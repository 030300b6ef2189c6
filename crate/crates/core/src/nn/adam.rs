//! Adam optimizer over named parameter maps.

use serde::{Deserialize, Serialize};

use super::layers::TensorMap;
use crate::tensor::TensorData;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global-norm gradient clip; 0 disables clipping.
    pub grad_clip: f64,
}

impl AdamConfig {
    pub fn new(learning_rate: f64, betas: (f64, f64)) -> Self {
        AdamConfig {
            learning_rate,
            beta1: betas.0,
            beta2: betas.1,
            eps: 1e-8,
            grad_clip: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub step_count: u64,
    pub m: TensorMap,
    pub v: TensorMap,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Adam {
            cfg,
            step_count: 0,
            m: TensorMap::new(),
            v: TensorMap::new(),
        }
    }

    /// One update over every `(name, grad)` pair. Parameter names absent from
    /// `grads` are left untouched. A zero learning rate leaves parameters
    /// bitwise unchanged while still advancing moment estimates.
    pub fn step(&mut self, params: &mut TensorMap, grads: &TensorMap) {
        self.step_count += 1;
        let t = self.step_count;
        let scale = match self.clip_scale(grads) {
            Some(s) => s,
            None => 1.0,
        };
        let bc1 = 1.0 - self.cfg.beta1.powi(t as i32);
        let bc2 = 1.0 - self.cfg.beta2.powi(t as i32);
        for (name, grad) in grads {
            let param = match params.get_mut(name) {
                Some(p) => p,
                None => panic!("optimizer saw unknown parameter {name}"),
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| TensorData::zeros(grad.raw_dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| TensorData::zeros(grad.raw_dim()));
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            ndarray::Zip::from(m).and(grad).for_each(|m, &g| {
                *m = b1 * *m + (1.0 - b1) * g * scale;
            });
            ndarray::Zip::from(&mut *v).and(grad).for_each(|v, &g| {
                let gs = g * scale;
                *v = b2 * *v + (1.0 - b2) * gs * gs;
            });
            if self.cfg.learning_rate != 0.0 {
                let lr = self.cfg.learning_rate;
                let eps = self.cfg.eps;
                ndarray::Zip::from(param).and(&*m).and(&*v).for_each(|p, &m, &v| {
                    let mhat = m / bc1;
                    let vhat = v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
            }
        }
    }

    fn clip_scale(&self, grads: &TensorMap) -> Option<f64> {
        if self.cfg.grad_clip <= 0.0 {
            return None;
        }
        let sq: f64 = grads
            .values()
            .map(|g| g.iter().map(|v| v * v).sum::<f64>())
            .sum();
        let norm = sq.sqrt();
        if norm > self.cfg.grad_clip {
            Some(self.cfg.grad_clip / norm)
        } else {
            Some(1.0)
        }
    }
}
