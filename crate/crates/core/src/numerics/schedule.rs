use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Cyclic cosine decay: within each cycle the rate follows a half cosine from
/// the cycle peak down to `lr_min`; each new cycle's peak is the previous
/// one scaled by `cycle_decay`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrSchedule {
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: u64,
    pub cycle_decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 5e-7,
            period: 7200,
            cycle_decay: 0.5,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.period == 0 {
            return Err(Error::Config("schedule period must be ≥ 1".into()));
        }
        if !(self.cycle_decay > 0.0 && self.cycle_decay <= 1.0) {
            return Err(Error::Config(format!(
                "cycle_decay must be in (0, 1], got {}",
                self.cycle_decay
            )));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 ≤ lr_min ≤ lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        let cycle = step / self.period;
        let phase = (step % self.period) as f64 / self.period as f64;
        // Peaks never sink below the floor.
        let peak = (self.lr_max * self.cycle_decay.powf(cycle as f64)).max(self.lr_min);
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * phase).cos());
        self.lr_min + (peak - self.lr_min) * cos
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_schedule_values() {
        let s = LrSchedule::default();
        assert_eq!(s.lr_at(0), 1.0e-4);
        assert!((s.lr_at(3600) - 5.025e-5).abs() < 1e-12);
        assert!((s.lr_at(7200) - 5.0e-5).abs() < 1e-12);
    }

    #[test]
    fn cycle_starts_hit_decayed_peak() {
        let s = LrSchedule::default();
        for c in 0..6u64 {
            let expected = s.lr_min + (s.lr_max * 0.5f64.powi(c as i32) - s.lr_min);
            assert!((s.lr_at(c * s.period) - expected).abs() < 1e-18);
        }
    }

    proptest! {
        #[test]
        fn bounded_and_monotone_within_cycle(step in 0u64..100_000) {
            let s = LrSchedule::default();
            let lr = s.lr_at(step);
            prop_assert!(lr >= s.lr_min && lr <= s.lr_max);
            if (step + 1) % s.period != 0 {
                prop_assert!(s.lr_at(step + 1) <= lr);
            }
        }
    }
}
