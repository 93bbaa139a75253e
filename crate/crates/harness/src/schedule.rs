//! Training hyperparameters and the warmup-then-cosine learning rate.

use serde::{Deserialize, Serialize};

use crate::error::HarnessError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub lr_max: f64,
    pub lr_init: f64,
    pub warmup_epochs: usize,
    pub lr_min: f64,
    pub eval_start_fraction: f64,
    pub periodic_ckpt_every: usize,
    pub seed: u64,
    /// Apply the stochastic augmentation pipeline to training batches.
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            weight_decay: 1e-2,
            lr_max: 1e-3,
            lr_init: 5e-4,
            warmup_epochs: 10,
            lr_min: 1e-6,
            eval_start_fraction: 0.7,
            periodic_ckpt_every: 5,
            seed: 0,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        let bad = |msg: String| Err(HarnessError::Config(msg));
        if !(self.lr_init > 0.0 && self.lr_init <= self.lr_max) {
            return bad(format!(
                "need 0 < lr_init <= lr_max, got lr_init={} lr_max={}",
                self.lr_init, self.lr_max
            ));
        }
        if self.warmup_epochs >= self.epochs {
            return bad(format!(
                "warmup_epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            ));
        }
        if !(self.eval_start_fraction > 0.0 && self.eval_start_fraction < 1.0) {
            return bad(format!("eval_start_fraction {} is outside (0, 1)", self.eval_start_fraction));
        }
        if self.batch_size == 0 || self.periodic_ckpt_every == 0 {
            return bad("batch_size and periodic_ckpt_every must be positive".into());
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("lr_min {} is outside [0, lr_max]", self.lr_min));
        }
        Ok(())
    }

    /// First 0-based epoch that is evaluated: `ceil(fraction * epochs)`.
    pub fn eval_start_epoch(&self) -> usize {
        (self.eval_start_fraction * self.epochs as f64 - 1e-9).ceil() as usize
    }
}

/// Learning rate at a fractional epoch position in `[0, epochs]`: linear
/// ramp `lr_init -> lr_max` over the warmup, then cosine `lr_max -> lr_min`.
pub fn lr_at(epoch: f64, tc: &TrainConfig) -> f64 {
    let warm = tc.warmup_epochs as f64;
    let total = tc.epochs as f64;
    let e = epoch.clamp(0.0, total);
    if e < warm {
        tc.lr_init + (tc.lr_max - tc.lr_init) * e / warm
    } else {
        let t = (e - warm) / (total - warm);
        tc.lr_min + (tc.lr_max - tc.lr_min) * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_anchor_points() {
        let tc = TrainConfig::default();
        assert_eq!(lr_at(0.0, &tc), 5e-4);
        assert_eq!(lr_at(10.0, &tc), 1e-3);
        assert!((lr_at(55.0, &tc) - (1e-3 + 1e-6) / 2.0).abs() < 1e-15);
        assert!((lr_at(100.0, &tc) - 1e-6).abs() < 1e-18);
        let left = lr_at(10.0 - 1e-9, &tc);
        assert!((left - 1e-3).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_monotone_in_each_phase() {
        let tc = TrainConfig::default();
        let xs: Vec<f64> = (0..=1000).map(|k| k as f64 * 0.1).collect();
        for w in xs.windows(2) {
            let (a, b) = (lr_at(w[0], &tc), lr_at(w[1], &tc));
            if w[1] <= 10.0 {
                assert!(b >= a);
            } else if w[0] >= 10.0 {
                assert!(b <= a);
            }
        }
    }

    #[test]
    fn validation_rules() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = [
            TrainConfig { lr_init: 2e-3, ..Default::default() },
            TrainConfig { lr_init: 0.0, ..Default::default() },
            TrainConfig { warmup_epochs: 100, ..Default::default() },
            TrainConfig { eval_start_fraction: 1.0, ..Default::default() },
            TrainConfig { eval_start_fraction: 0.0, ..Default::default() },
        ];
        for tc in bad {
            assert!(tc.validate().is_err(), "{tc:?}");
        }
    }

    #[test]
    fn eval_start_is_ceiling() {
        assert_eq!(TrainConfig::default().eval_start_epoch(), 70);
        let tc = TrainConfig { epochs: 7, warmup_epochs: 1, ..Default::default() };
        assert_eq!(tc.eval_start_epoch(), 5);
    }
}
