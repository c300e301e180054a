use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `δ·exp(−5(1−k)²)` with `k` clamped to `[0, 1]`.
pub fn ramp_lambda(delta: f64, k: f64) -> f64 {
    let k = k.clamp(0.0, 1.0);
    delta * (-5.0 * (1.0 - k) * (1.0 - k)).exp()
}

/// Weights of the fused, CNN and Transformer losses.
pub fn loss_coefficients(lambda: f64) -> [f64; 3] {
    let side = (1.0 - lambda) / 2.0;
    [lambda, side, side]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    /// Ramp amplitude.
    pub delta: f64,
    pub total_epochs: usize,
    pub initial_lr: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            delta: 1.0,
            total_epochs: 100,
            initial_lr: 1e-3,
            plateau_patience: 10,
            lr_factor: 0.5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.delta > 0.0 && self.initial_lr > 0.0 && self.total_epochs > 0) {
            return Err(Error::Config(
                "delta, initial_lr and total_epochs must be positive".into(),
            ));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(Error::Config(format!(
                "lr_factor {} outside (0, 1)",
                self.lr_factor
            )));
        }
        Ok(())
    }

    /// Training progress at the start of `epoch`.
    pub fn progress(&self, epoch: usize) -> f64 {
        (epoch as f64 / self.total_epochs as f64).clamp(0.0, 1.0)
    }

    pub fn lambda(&self, epoch: usize) -> f64 {
        ramp_lambda(self.delta, self.progress(epoch))
    }
}

/// Scales the learning rate after `patience` epochs without a new best.
#[derive(Debug, Clone, PartialEq)]
pub struct Plateau {
    pub lr: f64,
    pub best: f64,
    pub stale: usize,
    pub patience: usize,
    pub factor: f64,
}

impl Plateau {
    pub fn new(s: &TrainSchedule) -> Self {
        Plateau {
            lr: s.initial_lr,
            best: f64::INFINITY,
            stale: 0,
            patience: s.plateau_patience,
            factor: s.lr_factor,
        }
    }

    /// Records one epoch's validation loss; true when the rate was cut.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.stale = 0;
            return false;
        }
        self.stale += 1;
        if self.stale >= self.patience {
            self.lr *= self.factor;
            self.stale = 0;
            return true;
        }
        false
    }
}
