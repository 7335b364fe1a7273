//! One-cycle learning-rate schedule.

use core::f64::consts::PI;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct OneCycle {
    /// Fraction of steps spent warming up.
    pub warmup_frac: f64,
    /// Initial rate is `max_lr / div`.
    pub div: f64,
    /// Final rate is `max_lr / final_div`.
    pub final_div: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        Self {
            warmup_frac: 0.3,
            div: 25.0,
            final_div: 1e4,
        }
    }
}

fn cosine(from: f64, to: f64, progress: f64) -> f64 {
    to + (from - to) * 0.5 * (1.0 + libm::cos(PI * progress))
}

impl OneCycle {
    /// Cosine warmup from `max_lr / div` to `max_lr`, then cosine anneal to
    /// `max_lr / final_div` at the last step.
    pub fn lr(&self, step: usize, total: usize, max_lr: f64) -> Result<f64> {
        if step >= total {
            return Err(Error::Schedule { step, total });
        }
        let warm = libm::round(self.warmup_frac * total as f64) as usize;
        let start = max_lr / self.div;
        let end = max_lr / self.final_div;
        if step < warm {
            return Ok(cosine(start, max_lr, step as f64 / warm as f64));
        }
        let span = total - 1 - warm;
        if span == 0 {
            return Ok(if warm == 0 { start } else { max_lr });
        }
        Ok(cosine(max_lr, end, (step - warm) as f64 / span as f64))
    }
}

/// [`OneCycle`] with default constants.
pub fn one_cycle_lr(step: usize, total: usize, max_lr: f64) -> Result<f64> {
    OneCycle::default().lr(step, total, max_lr)
}
