//! Learning-rate schedule: linear warmup, constant plateau, linear
//! cooldown over the final fraction of training.
//!
//! A pure function of the global step, so growth events cannot introduce
//! discontinuities and resumed runs see identical values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    /// Fraction of total steps spent decaying at the end.
    pub cooldown_frac: f64,
    /// Terminal LR as a fraction of peak.
    pub final_lr_frac: f64,
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.total_steps == 0 || self.peak_lr <= 0.0 {
            return Err(Error::config("lr schedule needs total_steps > 0 and peak_lr > 0"));
        }
        if !(0.0..=1.0).contains(&self.cooldown_frac) || !(0.0..=1.0).contains(&self.final_lr_frac) {
            return Err(Error::config("cooldown_frac and final_lr_frac must be in [0,1]"));
        }
        if self.warmup_steps as f64 + self.cooldown_frac * self.total_steps as f64
            > self.total_steps as f64
        {
            return Err(Error::config("warmup overlaps cooldown"));
        }
        Ok(())
    }

    /// First step of the cooldown phase.
    pub fn cooldown_start(&self) -> u64 {
        self.total_steps - (self.total_steps as f64 * self.cooldown_frac).round() as u64
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let t = step.min(self.total_steps.saturating_sub(1));
        if t < self.warmup_steps {
            return self.peak_lr * (t + 1) as f64 / self.warmup_steps as f64;
        }
        let cd = self.cooldown_start();
        if t < cd {
            return self.peak_lr;
        }
        let final_lr = self.peak_lr * self.final_lr_frac;
        let span = (self.total_steps - cd) as f64;
        let frac = (t - cd + 1) as f64 / span;
        self.peak_lr + (final_lr - self.peak_lr) * frac
    }

    /// Largest per-step change the shape allows (used by the continuity
    /// property test).
    pub fn max_slope(&self) -> f64 {
        let warm = if self.warmup_steps > 0 {
            self.peak_lr / self.warmup_steps as f64
        } else {
            0.0
        };
        let cd_len = (self.total_steps - self.cooldown_start()).max(1) as f64;
        let cool = self.peak_lr * (1.0 - self.final_lr_frac) / cd_len;
        warm.max(cool)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            total_steps: 1000,
            warmup_steps: 100,
            peak_lr: 1e-3,
            cooldown_frac: 0.15,
            final_lr_frac: 0.0,
        }
    }

    #[test]
    fn shape_endpoints() {
        let s = sched();
        s.validate().unwrap();
        assert!((s.lr_at(99) - 1e-3).abs() < 1e-18);
        assert_eq!(s.lr_at(100), 1e-3);
        assert_eq!(s.lr_at(849), 1e-3);
        assert!((s.lr_at(999) - 0.0).abs() < 1e-18);
        assert_eq!(s.cooldown_start(), 850);
    }

    #[test]
    fn continuity_bounded_by_slope() {
        let s = sched();
        let bound = s.max_slope() + 1e-15;
        for t in 0..s.total_steps - 1 {
            let d = (s.lr_at(t + 1) - s.lr_at(t)).abs();
            assert!(d <= bound, "jump {} at step {}", d, t);
        }
    }

    #[test]
    fn pure_function_of_step() {
        // The value at t does not depend on anything but t: calling in any
        // order, interleaved, yields identical values (scheduled growth at
        // t-1 cannot shift it).
        let s = sched();
        let forward: Vec<f64> = (0..1000).map(|t| s.lr_at(t)).collect();
        let backward: Vec<f64> = (0..1000).rev().map(|t| s.lr_at(t)).collect();
        for (t, lr) in backward.into_iter().rev().enumerate() {
            assert_eq!(forward[t], lr);
        }
    }
}
