//! Step schedule for the positive-set threshold λ and warmup + cosine
//! learning rate.
//!
//! Epochs are 1-indexed. A decay boundary `b` means "after epoch `b`": the
//! lowered λ applies from epoch `b + 1` on.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference horizon the default boundaries are expressed against.
pub const REFERENCE_EPOCHS: usize = 30;
/// Default λ decay boundaries at the reference horizon.
pub const REFERENCE_DECAY_EPOCHS: [usize; 2] = [2, 15];
/// Default warmup length at the reference horizon.
pub const REFERENCE_WARMUP_EPOCHS: usize = 2;

/// λ values are snapped to this grid so decimal schedules such as
/// 0.95 -> 0.90 -> 0.85 land on the nearest double of each decimal.
const LAMBDA_GRID: f64 = 1e9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaSchedule {
    pub initial: f64,
    pub step_decrement: f64,
    pub decay_epochs: Vec<usize>,
    pub floor: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        Self {
            initial: 0.95,
            step_decrement: 0.05,
            decay_epochs: REFERENCE_DECAY_EPOCHS.to_vec(),
            floor: -1.0,
        }
    }
}

/// Scales the reference boundaries `{2, 15}` of a 30-epoch run to `epochs`,
/// never earlier than "after epoch 1".
pub fn scaled_decay_epochs(epochs: usize) -> Vec<usize> {
    REFERENCE_DECAY_EPOCHS
        .iter()
        .map(|&b| scale_epoch(epochs, b).max(1))
        .collect()
}

/// Scales the reference two warmup epochs of a 30-epoch run to `epochs`,
/// keeping at least one warmup epoch and one cosine epoch when `epochs >= 2`.
pub fn scaled_warmup_epochs(epochs: usize) -> usize {
    if epochs < 2 {
        return 0;
    }
    scale_epoch(epochs, REFERENCE_WARMUP_EPOCHS).clamp(1, epochs - 1)
}

fn scale_epoch(epochs: usize, reference: usize) -> usize {
    ((epochs * reference) as f64 / REFERENCE_EPOCHS as f64).round() as usize
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial > 0.0 && self.initial <= 1.0) {
            return Err(Error::Config(format!(
                "lambda_initial {} must lie in (0, 1]",
                self.initial
            )));
        }
        if !(self.step_decrement > 0.0) {
            return Err(Error::Config(format!(
                "lambda_step_decrement {} must be positive",
                self.step_decrement
            )));
        }
        if !(-1.0..=1.0).contains(&self.floor) {
            return Err(Error::Config(format!(
                "lambda_floor {} must lie in [-1, 1]",
                self.floor
            )));
        }
        if self.decay_epochs.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("lambda_decay_epochs must be sorted".into()));
        }
        Ok(())
    }
}

pub fn lambda_at_epoch(sched: &LambdaSchedule, epoch: usize) -> f64 {
    let drops = sched.decay_epochs.iter().filter(|&&b| b < epoch).count();
    let snap = |v: f64| (v * LAMBDA_GRID).round();
    let lambda = (snap(sched.initial) - drops as f64 * snap(sched.step_decrement)) / LAMBDA_GRID;
    lambda.max(sched.floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub init_lr: f64,
    pub max_lr: f64,
    pub warmup_epochs: usize,
    pub total_epochs: usize,
    pub min_lr: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            init_lr: 4e-6,
            max_lr: 1.6e-3,
            warmup_epochs: REFERENCE_WARMUP_EPOCHS,
            total_epochs: REFERENCE_EPOCHS,
            min_lr: 0.0,
        }
    }
}

impl LrSchedule {
    pub fn validate(&self) -> Result<()> {
        // A zero schedule (all rates 0) is allowed so frozen runs are expressible.
        let frozen = self.init_lr == 0.0 && self.max_lr == 0.0 && self.min_lr == 0.0;
        if !frozen && !(self.init_lr > 0.0 && self.init_lr <= self.max_lr) {
            return Err(Error::Config(format!(
                "need 0 < lr_init ({}) <= lr_max ({})",
                self.init_lr, self.max_lr
            )));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.max_lr) {
            return Err(Error::Config(format!(
                "lr_min {} must lie in [0, lr_max]",
                self.min_lr
            )));
        }
        if self.total_epochs == 0 || self.warmup_epochs >= self.total_epochs {
            return Err(Error::Config(format!(
                "warmup_epochs ({}) must be below epochs ({})",
                self.warmup_epochs, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Learning rate at global step `step` (0-based).
///
/// Warmup covers the first `warmup_epochs * steps_per_epoch` steps and rises
/// linearly from `init_lr` at step 0 to `max_lr` at its last step. The cosine
/// phase starts from that same step and reaches `min_lr` on the final step of
/// the run.
pub fn lr_at_step(sched: &LrSchedule, step: usize, steps_per_epoch: usize) -> f64 {
    let warmup = sched.warmup_epochs * steps_per_epoch;
    let total = sched.total_epochs * steps_per_epoch;
    if warmup > 0 && step + 1 < warmup {
        let frac = step as f64 / (warmup - 1) as f64;
        return sched.init_lr + (sched.max_lr - sched.init_lr) * frac;
    }
    let start = warmup.saturating_sub(1);
    let span = total.saturating_sub(1).saturating_sub(start);
    let progress = if span == 0 {
        1.0
    } else {
        ((step - start) as f64 / span as f64).min(1.0)
    };
    sched.min_lr + 0.5 * (sched.max_lr - sched.min_lr) * (1.0 + (PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_defaults() {
        let s = LambdaSchedule::default();
        assert_eq!(lambda_at_epoch(&s, 1), 0.95);
        assert_eq!(lambda_at_epoch(&s, 2), 0.95);
        assert_eq!(lambda_at_epoch(&s, 3), 0.90);
        assert_eq!(lambda_at_epoch(&s, 15), 0.90);
        assert_eq!(lambda_at_epoch(&s, 16), 0.85);
        assert_eq!(lambda_at_epoch(&s, 30), 0.85);
    }

    #[test]
    fn lambda_floor() {
        let s = LambdaSchedule {
            initial: 0.5,
            step_decrement: 0.4,
            decay_epochs: vec![1, 2, 3, 4, 5],
            floor: -0.5,
        };
        assert_eq!(lambda_at_epoch(&s, 10), -0.5);
    }

    #[test]
    fn lambda_non_increasing_with_exact_drops() {
        let s = LambdaSchedule {
            decay_epochs: vec![3, 7, 7, 11],
            ..LambdaSchedule::default()
        };
        let values: Vec<f64> = (1..=20).map(|e| lambda_at_epoch(&s, e)).collect();
        assert!(values.windows(2).all(|w| w[1] <= w[0]));
        let drops = values.windows(2).filter(|w| w[1] < w[0]).count();
        // repeated boundaries collapse into one visible drop of twice the size
        assert_eq!(drops, 3);
    }

    #[test]
    fn scaled_boundaries() {
        assert_eq!(scaled_decay_epochs(30), vec![2, 15]);
        assert_eq!(scaled_decay_epochs(10), vec![1, 5]);
        assert_eq!(scaled_decay_epochs(5), vec![1, 3]);
        assert_eq!(scaled_warmup_epochs(30), 2);
        assert_eq!(scaled_warmup_epochs(5), 1);
        assert_eq!(scaled_warmup_epochs(1), 0);
    }

    #[test]
    fn lr_defaults() {
        let s = LrSchedule::default();
        let spe = 100;
        assert_eq!(lr_at_step(&s, 0, spe), 4e-6);
        assert_eq!(lr_at_step(&s, 2 * spe - 1, spe), 1.6e-3);
        assert_eq!(lr_at_step(&s, 30 * spe - 1, spe), 0.0);
        assert!(lr_at_step(&s, spe, spe) > 4e-6);
        assert!(lr_at_step(&s, 10 * spe, spe) < 1.6e-3);
    }

    #[test]
    fn lr_continuous_at_junction() {
        let s = LrSchedule {
            min_lr: 1e-5,
            ..LrSchedule::default()
        };
        let spe = 37;
        let w = 2 * spe;
        let linear_end = s.init_lr + (s.max_lr - s.init_lr) * ((w - 1) as f64 / (w - 1) as f64);
        let cosine_start = lr_at_step(&s, w - 1, spe);
        assert!((linear_end - cosine_start).abs() < 1e-12);
        // one step either side stays close
        assert!((lr_at_step(&s, w, spe) - s.max_lr).abs() < 1e-6);
        assert!((lr_at_step(&s, w - 2, spe) - s.max_lr).abs() < 1e-4);
    }

    #[test]
    fn lr_without_warmup() {
        let s = LrSchedule {
            warmup_epochs: 0,
            total_epochs: 3,
            ..LrSchedule::default()
        };
        assert_eq!(lr_at_step(&s, 0, 10), 1.6e-3);
        assert_eq!(lr_at_step(&s, 29, 10), 0.0);
    }

    #[test]
    fn validation() {
        assert!(LrSchedule::default().validate().is_ok());
        let bad = LrSchedule {
            warmup_epochs: 30,
            ..LrSchedule::default()
        };
        assert!(bad.validate().is_err());
        let bad = LambdaSchedule {
            initial: 0.0,
            ..LambdaSchedule::default()
        };
        assert!(bad.validate().is_err());
    }
}
