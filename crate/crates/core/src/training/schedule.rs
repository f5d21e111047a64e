use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// Linear warmup to `peak`, then cosine decay reaching `min` at step `total`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub warmup: usize,
    pub total: usize,
    pub peak: f64,
    pub min: f64,
}

impl Schedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let span = self.total.saturating_sub(self.warmup).max(1);
        let progress = ((step - self.warmup) as f64 / span as f64).min(1.0);
        self.min + 0.5 * (self.peak - self.min) * (1.0 + (PI * progress).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let s = Schedule {
            warmup: 1000,
            total: 5000,
            peak: 5e-5,
            min: 1e-5,
        };
        assert_eq!(s.lr_at(999), 5e-5);
        assert!((s.lr_at(499) - 2.5e-5).abs() < 1e-18);
        assert!((s.lr_at(0) - 5e-8).abs() < 1e-20);
        assert!((s.lr_at(1000) - 5e-5).abs() < 1e-20);
        assert!((s.lr_at(5000) - 1e-5).abs() < 1e-20);
        assert!(s.lr_at(4999) - 1e-5 < 1e-11);
        assert_eq!(s.lr_at(7000), s.lr_at(5000));
        assert!((1000..4999).all(|t| s.lr_at(t + 1) <= s.lr_at(t)));
    }
}
