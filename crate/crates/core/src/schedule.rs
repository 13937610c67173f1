//! Linear warmup followed by cosine annealing to a floor.

use crate::error::{Error, Result};

pub const DEFAULT_LR_MIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub lr: f64,
    pub lr_min: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(lr: f64, warmup_steps: usize, total_steps: usize) -> Result<Self> {
        if !(lr > 0.0) {
            return Err(Error::Config(format!("lr must be positive, got {lr}")));
        }
        if warmup_steps > total_steps {
            return Err(Error::Config(format!("warmup of {warmup_steps} steps exceeds {total_steps} total")));
        }
        Ok(LrSchedule { lr, lr_min: DEFAULT_LR_MIN.min(lr), warmup_steps, total_steps })
    }

    /// Steps past the end clamp to the final value.
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.lr;
        }
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_min + (self.lr - self.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_peak_and_midpoint() {
        let s = LrSchedule::new(2e-4, 10, 110).unwrap();
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(10), 2e-4);
        assert!((s.lr_at(60) - 1.005e-4).abs() < 1e-12);
        assert!((s.lr_at(110) - 1e-6).abs() < 1e-18);
        assert_eq!(s.lr_at(500), s.lr_at(110));
    }

    #[test]
    fn continuous_at_junction() {
        let s = LrSchedule::new(2e-4, 1000, 100_000).unwrap();
        assert!((s.lr_at(1000) - s.lr_at(999)).abs() < 1e-6);
        let limit = s.lr * 999.999_999 / 1000.0;
        assert!((s.lr_at(1000) - limit).abs() < 1e-12);
    }

    #[test]
    fn invalid_configs() {
        assert!(LrSchedule::new(0.0, 0, 10).is_err());
        assert!(LrSchedule::new(1e-3, 11, 10).is_err());
        assert_eq!(LrSchedule::new(1e-3, 0, 0).unwrap().lr_at(3), 1e-3);
    }
}
