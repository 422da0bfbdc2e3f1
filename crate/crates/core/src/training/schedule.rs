use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Linear warmup from zero to `lr_max`, then cosine decay to zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CosineSchedule {
    pub lr_max: f64,
    pub warmup_fraction: f64,
}

impl CosineSchedule {
    pub fn warmup_steps(&self, total_steps: u64) -> u64 {
        (self.warmup_fraction * total_steps as f64).round() as u64
    }

    pub fn lr_at(&self, step: u64, total_steps: u64) -> Result<f64> {
        if total_steps == 0 {
            return Err(Error::Domain("schedule needs at least one step".into()));
        }
        if step > total_steps {
            return Err(Error::Domain(format!(
                "step {step} is past the final step {total_steps}"
            )));
        }
        let warmup = self.warmup_steps(total_steps);
        if step < warmup {
            return Ok(self.lr_max * step as f64 / warmup as f64);
        }
        if warmup == total_steps {
            return Ok(self.lr_max);
        }
        let progress = (step - warmup) as f64 / (total_steps - warmup) as f64;
        Ok(self.lr_max * 0.5 * (1.0 + (PI * progress).cos()))
    }
}
