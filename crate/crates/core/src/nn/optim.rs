//! Plain SGD and the plateau learning-rate schedule with early stopping.

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// `p <- p - lr * g` for every parameter tensor. Refuses to apply a
/// non-finite gradient and leaves parameters untouched in that case.
pub fn sgd_step<T: Real>(params: &mut [&mut Tensor<T>], grads: &[Tensor<T>], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::shape("sgd_step", format!("{} params vs {} grads", params.len(), grads.len())));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("param {i} shape {:?} vs grad {:?}", p.shape(), g.shape()),
            ));
        }
        if let Some(j) = g.data().iter().position(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "non-finite gradient in parameter {i} at index {j}: {}",
                g.data()[j]
            )));
        }
    }
    let lr = T::lit(lr);
    for (p, g) in params.iter_mut().zip(grads) {
        for (a, &b) in p.data_mut().iter_mut().zip(g.data()) {
            *a -= lr * b;
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchedulerConfig {
    pub initial_lr: f64,
    pub factor: f64,
    pub threshold: f64,
    pub patience: u32,
    pub max_decays: u32,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            initial_lr: 0.01,
            factor: 0.7,
            threshold: 0.001,
            patience: 2,
            max_decays: 6,
        }
    }
}

impl SchedulerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return Err(Error::Config("initial learning rate must be positive".into()));
        }
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config("decay factor must lie in (0, 1)".into()));
        }
        if self.patience == 0 || !(self.threshold >= 0.0) {
            return Err(Error::Config("patience must be positive and threshold nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SchedulerAction {
    Continue,
    DecayLr,
    Stop,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SchedulerState {
    pub config: SchedulerConfig,
    pub best_cv_loss: f64,
    pub epochs_since_improve: u32,
    pub decay_count: u32,
}

impl SchedulerState {
    pub fn new(config: SchedulerConfig) -> Self {
        SchedulerState {
            config,
            best_cv_loss: f64::INFINITY,
            epochs_since_improve: 0,
            decay_count: 0,
        }
    }

    /// `initial_lr * factor^decay_count`, evaluated directly rather than by
    /// repeated multiplication.
    pub fn learning_rate(&self) -> f64 {
        self.config.initial_lr * self.config.factor.powi(self.decay_count as i32)
    }

    /// Feeds one epoch's cross-validation loss.
    ///
    /// An epoch improves when `best - cv_loss >= threshold`. After `patience`
    /// consecutive non-improving epochs the rate decays; once `max_decays`
    /// decays have happened, the next exhausted patience stops training
    /// instead. Improvements reset the patience counter but never the decay
    /// count.
    pub fn step(&mut self, cv_loss: f64) -> SchedulerAction {
        let improvement = self.best_cv_loss - cv_loss;
        if improvement >= self.config.threshold {
            self.best_cv_loss = cv_loss;
            self.epochs_since_improve = 0;
            return SchedulerAction::Continue;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve < self.config.patience {
            return SchedulerAction::Continue;
        }
        self.epochs_since_improve = 0;
        if self.decay_count >= self.config.max_decays {
            SchedulerAction::Stop
        } else {
            self.decay_count += 1;
            SchedulerAction::DecayLr
        }
    }
}
