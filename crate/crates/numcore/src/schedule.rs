//! Linear warmup followed by epoch-based multi-step decay.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LrSchedule {
    pub base_lr: f64,
    /// Optimizer steps over which the rate ramps linearly up to `base_lr`.
    pub warmup_steps: u64,
    /// First epoch at which the decay factor is applied.
    pub decay_start_epoch: u64,
    pub decay_step_epochs: u64,
    pub decay_rate: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            base_lr: 1e-4,
            warmup_steps: 100,
            decay_start_epoch: 20,
            decay_step_epochs: 5,
            decay_rate: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(self.decay_rate > 0.0 && self.decay_rate < 1.0) {
            return Err(format!("decay_rate must lie in (0, 1), got {}", self.decay_rate));
        }
        if self.decay_step_epochs == 0 {
            return Err("decay_step_epochs must be at least 1".into());
        }
        Ok(())
    }

    /// Number of decay factors in force at `epoch`.
    pub fn decay_count(&self, epoch: u64) -> u64 {
        if epoch < self.decay_start_epoch {
            0
        } else {
            (epoch - self.decay_start_epoch) / self.decay_step_epochs + 1
        }
    }

    /// Learning rate for optimizer step `global_step` (0-based) taken during `epoch`.
    pub fn lr_at(&self, global_step: u64, epoch: u64) -> f64 {
        let warmup = if self.warmup_steps == 0 {
            1.0
        } else {
            ((global_step + 1) as f64 / self.warmup_steps as f64).min(1.0)
        };
        let decays = self.decay_count(epoch).min(i32::MAX as u64) as i32;
        self.base_lr * warmup * self.decay_rate.powi(decays)
    }
}
