use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Cosine annealing from `lr_init` to `lr_min` over `period` epochs. After
/// the period the rate stays at `lr_min`, or restarts when `restarts` is set.
pub fn cosine_lr(epoch: usize, lr_init: f64, lr_min: f64, period: usize, restarts: bool) -> f64 {
    if period == 0 {
        return lr_min;
    }
    let t = if restarts { epoch % period } else { epoch.min(period) };
    lr_min + (lr_init - lr_min) * (1.0 + (PI * t as f64 / period as f64).cos()) / 2.0
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopDecision {
    Continue,
    Stop,
}

/// Tracks the best validation loss; stops once more than `patience` epochs
/// have passed without a strict improvement.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: Option<f64>,
    pub best_epoch: Option<usize>,
    pub since_best: usize,
    epochs_seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            best_epoch: None,
            since_best: 0,
            epochs_seen: 0,
        }
    }

    /// Whether the last update set a new best.
    pub fn improved(&self) -> bool {
        self.since_best == 0 && self.best.is_some()
    }

    pub fn update(&mut self, val_loss: f64) -> Result<StopDecision> {
        let epoch = self.epochs_seen;
        self.epochs_seen += 1;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                reason: format!("validation loss {val_loss}"),
            });
        }
        if self.best.is_none_or(|b| val_loss < b) {
            self.best = Some(val_loss);
            self.best_epoch = Some(epoch);
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(if self.since_best > self.patience {
            StopDecision::Stop
        } else {
            StopDecision::Continue
        })
    }
}
