//! AdamW with per-group learning rates and a constant schedule.

use serde::{Deserialize, Serialize};

use crate::params::{Mat, ParamGrads, ParamGroup, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr_encoder: f64,
    pub lr_heads: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr_encoder: 4e-5,
            lr_heads: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step: u64,
    /// First and second moments, indexed like the store; empty for frozen
    /// tensors.
    pub m: Vec<Mat>,
    pub v: Vec<Mat>,
}

impl AdamW {
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = |e: &crate::params::ParamEntry| {
            if e.group == ParamGroup::Frozen {
                Mat::zeros((0, 0))
            } else {
                Mat::zeros(e.value.raw_dim())
            }
        };
        Self {
            config,
            step: 0,
            m: store.entries().iter().map(zeros).collect(),
            v: store.entries().iter().map(zeros).collect(),
        }
    }

    fn lr(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.config.lr_encoder,
            ParamGroup::Head => self.config.lr_heads,
            ParamGroup::Frozen => 0.0,
        }
    }

    /// One decoupled-weight-decay Adam update. Tensors without a gradient
    /// still decay and advance their moments with a zero gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &ParamGrads) {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (i, entry) in store.entries_mut().iter_mut().enumerate() {
            if entry.group == ParamGroup::Frozen {
                continue;
            }
            let lr = self.lr(entry.group);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let g = grads.0[i].as_ref();
            ndarray::Zip::indexed(&mut entry.value)
                .and(m)
                .and(v)
                .for_each(|idx, p, m, v| {
                    let gi = g.map_or(0.0, |g| g[idx]);
                    *m = c.beta1 * *m + (1.0 - c.beta1) * gi;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * gi * gi;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * (mhat / (vhat.sqrt() + c.eps) + c.weight_decay * *p);
                });
        }
    }
}
