//! Linear warmup followed by a half-period cosine decay to zero.

use serde::{Deserialize, Serialize};

/// Reference batch size the base learning rate is quoted for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LrScaling {
    /// `lr = base * batch / 256`.
    #[default]
    Per256,
    /// `lr = base * batch / 512`.
    Per512,
    /// `lr = base`.
    None,
}

impl LrScaling {
    pub fn peak(self, base_lr: f64, batch: usize) -> f64 {
        match self {
            LrScaling::Per256 => base_lr * batch as f64 / 256.0,
            LrScaling::Per512 => base_lr * batch as f64 / 512.0,
            LrScaling::None => base_lr,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl LrSchedule {
    pub fn new(base_lr: f64, batch: usize, scaling: LrScaling, warmup: u64, total: u64) -> Self {
        Self {
            peak: scaling.peak(base_lr, batch),
            warmup_steps: warmup.min(total),
            total_steps: total,
        }
    }

    /// Learning rate for optimizer step `step` (0-based); zero from
    /// `total_steps` on.
    pub fn at(&self, step: u64) -> f64 {
        if step >= self.total_steps {
            return 0.0;
        }
        if step < self.warmup_steps {
            return self.peak * step as f64 / self.warmup_steps as f64;
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        0.5 * self.peak * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}
