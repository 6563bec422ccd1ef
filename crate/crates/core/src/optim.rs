//! AdamW with decoupled weight decay and a linear learning-rate schedule.

use crate::model::ModelParams;
use crate::numerics::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// `base·(1 − step/total)`, for `step` in `0..total`.
pub fn linear_decay(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 - step as f64 / total as f64)
}

pub struct AdamW {
    pub cfg: AdamWConfig,
    pub step: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Matrix> = params
            .named()
            .iter()
            .map(|(_, m)| Matrix::zeros(m.rows(), m.cols()))
            .collect();
        Self {
            cfg,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update. Tensors with `trainable[k] == false` are left untouched. Weight decay
    /// applies to 2-D weight matrices only, not to vectors or scalars.
    pub fn update(&mut self, params: &mut ModelParams, grads: &ModelParams, lr: f64, trainable: &[bool]) {
        self.step += 1;
        let t = self.step as i32;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let grads = grads.named();
        for (k, (_, p)) in params.named_mut().into_iter().enumerate() {
            if !trainable[k] {
                continue;
            }
            let decay = if p.rows() > 1 && p.cols() > 1 { c.weight_decay } else { 0.0 };
            let g = grads[k].1.data();
            let m = self.m[k].data_mut();
            let v = self.v[k].data_mut();
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                *x -= lr * (mhat / (vhat.sqrt() + c.eps) + decay * *x);
            }
        }
    }
}
