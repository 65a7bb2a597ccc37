//! Learning-rate schedules.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Constant,
    /// Linear ramp from 0 over the warmup, then linear decay to 0.
    LinearWarmupDecay,
    /// The linear pattern restarted at every episode boundary.
    Cyclical,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub kind: ScheduleKind,
    pub base_lr: f64,
    pub warmup_fraction: f64,
    pub total_steps: usize,
    /// Step indices where a new cycle starts (cyclical only).
    #[serde(default)]
    pub episode_boundaries: Vec<usize>,
}

impl LrSchedule {
    pub fn constant(base_lr: f64, total_steps: usize) -> Self {
        Self {
            kind: ScheduleKind::Constant,
            base_lr,
            warmup_fraction: 0.0,
            total_steps,
            episode_boundaries: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!(
                "base_lr must be >= 0, got {}",
                self.base_lr
            )));
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return Err(Error::Config(format!(
                "warmup_fraction must be in [0, 1], got {}",
                self.warmup_fraction
            )));
        }
        Ok(())
    }

    fn linear(&self, local: usize, len: usize) -> f64 {
        let warm = self.warmup_fraction * len as f64;
        let s = local as f64;
        if s < warm {
            self.base_lr * s / warm
        } else if (len as f64) > warm {
            self.base_lr * (len as f64 - s) / (len as f64 - warm)
        } else {
            self.base_lr
        }
    }

    /// Learning rate at `step` (0-based).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::InvalidInput(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        let lr = match self.kind {
            ScheduleKind::Constant => self.base_lr,
            ScheduleKind::LinearWarmupDecay => self.linear(step, self.total_steps),
            ScheduleKind::Cyclical => {
                let start = self
                    .episode_boundaries
                    .iter()
                    .copied()
                    .filter(|&b| b <= step)
                    .max()
                    .unwrap_or(0);
                let end = self
                    .episode_boundaries
                    .iter()
                    .copied()
                    .filter(|&b| b > step && b <= self.total_steps)
                    .min()
                    .unwrap_or(self.total_steps);
                self.linear(step - start, end - start)
            }
        };
        Ok(lr.max(0.0))
    }
}
