//! AdamW with decoupled weight decay.

use crate::autograd::Gradients;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Applied to weights of rank >= 2 only; batch-norm affine parameters and
    /// biases are not decayed.
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

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient held NaN or infinity; nothing was changed.
    SkippedNonFinite,
}

#[derive(Debug, Clone)]
pub struct AdamW {
    pub cfg: AdamWConfig,
    m: Vec<Option<Tensor>>,
    v: Vec<Option<Tensor>>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig) -> Self {
        Self {
            cfg,
            m: Vec::new(),
            v: Vec::new(),
            step: 0,
        }
    }

    /// Number of applied updates.
    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.m.get(id.index()).and_then(Option::as_ref)
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) -> StepOutcome {
        if !grads.all_finite() {
            return StepOutcome::SkippedNonFinite;
        }
        let n = store.num_params();
        self.m.resize(n, None);
        self.v.resize(n, None);
        self.step += 1;
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.param_ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.param_mut(id);
            let decay = if p.shape().len() >= 2 { weight_decay } else { 0.0 };
            let m = self.m[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v[id.index()].get_or_insert_with(|| Tensor::zeros(p.shape()));
            for (((w, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = beta1 * *mi + (1.0 - beta1) * gi;
                *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
                let update = (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *w -= lr * (update + decay * *w);
            }
        }
        StepOutcome::Applied
    }
}
