use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};

/// Linear warm-up followed by cosine decay, indexed by optimizer step.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmupCosine {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub total_steps: u64,
}

impl WarmupCosine {
    pub fn new(base_lr: f64, warmup_steps: u64, total_steps: u64) -> Result<Self> {
        if !(base_lr > 0.0) {
            bail!(Config, "learning rate must be positive");
        }
        if total_steps == 0 || warmup_steps >= total_steps {
            bail!(Config, "warm-up ({warmup_steps} steps) must be shorter than training ({total_steps} steps)");
        }
        Ok(WarmupCosine { base_lr, warmup_steps, total_steps })
    }

    /// `lr * (step + 1) / W` during warm-up, then
    /// `lr * (1 + cos(pi * (step - W) / (T - 1 - W))) / 2`, which reaches the
    /// peak at `step = W - 1` and exactly zero at the last step.
    pub fn lr_at(&self, step: u64) -> Result<f64> {
        let (w, t) = (self.warmup_steps, self.total_steps);
        if step >= t {
            bail!(Index, "step {step} outside 0..{t}");
        }
        if step < w {
            return Ok(self.base_lr * (step + 1) as f64 / w as f64);
        }
        let span = t - 1 - w;
        if span == 0 {
            return Ok(self.base_lr);
        }
        let frac = (step - w) as f64 / span as f64;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos()))
    }
}

/// Learning rate at `step` for `lr`, `warmup_steps` and `total_steps`.
pub fn lr_at(step: u64, lr: f64, warmup_steps: u64, total_steps: u64) -> Result<f64> {
    WarmupCosine::new(lr, warmup_steps, total_steps)?.lr_at(step)
}
