use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
        }
    }
}

/// Adaptive moment estimation without weight decay.
pub struct Adam {
    cfg: AdamConfig,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

pub type GradMap = BTreeMap<String, Tensor>;

/// Euclidean norm over every gradient tensor.
pub fn global_norm(grads: &GradMap) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut GradMap, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let c = max_norm / norm;
        for g in grads.values_mut() {
            g.scale_in_place(c);
        }
    }
    norm
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Returns the
    /// pre-clip gradient norm.
    pub fn step(&mut self, params: &mut ParamSet, mut grads: GradMap) -> f64 {
        let norm = match self.cfg.clip_norm {
            Some(max) => clip_global_norm(&mut grads, max),
            None => global_norm(&grads),
        };
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for (name, p) in params.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = b1 * *mv + (1.0 - b1) * gv;
                *vv = b2 * *vv + (1.0 - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        norm
    }
}
