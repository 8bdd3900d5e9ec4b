//! Adam optimizer over named parameter groups with a warmup schedule.

use crate::tensor::{Matrix, ParamGroup};
use std::collections::BTreeMap;

#[derive(Debug, Clone)]
pub struct AdamCfg {
    pub lr_max: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Fraction of `total_steps` spent ramping linearly from 0 to `lr_max`.
    pub warmup_frac: f64,
    pub total_steps: usize,
}

impl AdamCfg {
    pub fn new(lr_max: f64, warmup_frac: f64, total_steps: usize) -> Self {
        AdamCfg {
            lr_max,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            warmup_frac,
            total_steps,
        }
    }
}

/// First/second moments per tensor name, keyed deterministically.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamCfg,
    pub step: usize,
    pub moments: BTreeMap<String, (Matrix, Matrix)>,
}

impl Adam {
    pub fn new(cfg: AdamCfg) -> Self {
        Adam {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let warmup = ((self.cfg.total_steps as f64) * self.cfg.warmup_frac).ceil() as usize;
        if warmup > 0 && step < warmup {
            self.cfg.lr_max * (step + 1) as f64 / warmup as f64
        } else {
            self.cfg.lr_max
        }
    }

    /// One update over every tensor `trainable` admits; grads must already
    /// hold the batch gradient.
    pub fn apply<M: ParamGroup>(&mut self, model: &mut M, trainable: &dyn Fn(&str) -> bool) {
        let lr = self.lr_at(self.step);
        self.step += 1;
        let t = self.step as f64;
        let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
        let bc1 = 1.0 - b1.powf(t);
        let bc2 = 1.0 - b2.powf(t);
        let moments = &mut self.moments;
        model.visit_params(&mut |name, p| {
            if !trainable(name) {
                return;
            }
            let (m, v) = moments
                .entry(name.to_string())
                .or_insert_with(|| {
                    (
                        Matrix::zeros(p.value.rows(), p.value.cols()),
                        Matrix::zeros(p.value.rows(), p.value.cols()),
                    )
                });
            let g = p.grad.data();
            let val = p.value.data_mut();
            for i in 0..g.len() {
                let gi = g[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                val[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
