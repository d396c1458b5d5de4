use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Linear warmup from 0 to `peak` over `[0, warmup]`, then linear decay to 0
/// at `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub peak: f64,
    pub warmup: u64,
    pub total: u64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self::desk()
    }
}

impl LrSchedule {
    pub fn desk() -> Self {
        Self {
            peak: 1e-3,
            warmup: 100,
            total: 2000,
        }
    }

    /// The full-scale pre-training schedule.
    pub fn full_scale() -> Self {
        Self {
            peak: 1e-4,
            warmup: 2500,
            total: 200_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.peak >= 0.0 && self.peak.is_finite()) || self.total == 0 || self.warmup >= self.total {
            return Err(Error::Config(format!("invalid schedule {self:?}")));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> Result<f64> {
        self.validate()?;
        if step > self.total {
            return Err(Error::InvalidArgument(format!("step {step} beyond schedule end {}", self.total)));
        }
        Ok(if step < self.warmup {
            self.peak * step as f64 / self.warmup as f64
        } else {
            self.peak * (self.total - step) as f64 / (self.total - self.warmup) as f64
        })
    }
}
