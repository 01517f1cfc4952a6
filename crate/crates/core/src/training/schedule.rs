use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing from `eta0` down to `eta_min` over `period` steps,
/// restarting at every multiple of `period`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub eta0: f64,
    pub eta_min: f64,
    pub period: usize,
}

impl LrSchedule {
    pub fn new(eta0: f64, eta_min: f64, period: usize) -> Result<Self> {
        if period == 0 {
            return Err(Error::Config("schedule period must be at least 1 step".into()));
        }
        if !(eta_min >= 0.0) || !(eta0 >= eta_min) || !eta0.is_finite() {
            return Err(Error::Config(format!("need 0 <= eta_min <= eta0, got eta_min={eta_min}, eta0={eta0}")));
        }
        Ok(Self { eta0, eta_min, period })
    }

    /// A schedule that never moves the parameters.
    pub fn frozen() -> Self {
        Self { eta0: 0.0, eta_min: 0.0, period: 1 }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        let phase = (step % self.period) as f64 / self.period as f64;
        self.eta_min + 0.5 * (self.eta0 - self.eta_min) * (1.0 + (PI * phase).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_points() {
        let s = LrSchedule::new(1.0, 0.0, 100).unwrap();
        assert_eq!(s.lr_at(0), 1.0);
        assert!((s.lr_at(50) - 0.5).abs() < 1e-15);
        assert_eq!(s.lr_at(100), 1.0);
        assert!(s.lr_at(99) > 0.0 && s.lr_at(99) < 1e-3);
    }

    #[test]
    fn rejects_bad_bounds() {
        assert!(LrSchedule::new(1.0, 0.0, 0).is_err());
        assert!(LrSchedule::new(0.1, 0.2, 10).is_err());
        assert_eq!(LrSchedule::frozen().lr_at(7), 0.0);
    }
}
