//! Mini-batch SGD training with per-epoch cross-validation and the plateau
//! schedule driving both learning-rate decay and early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dense::nll_loss;
use super::model::{argmax, Model};
use super::optim::{sgd_step, SchedulerAction, SchedulerConfig, SchedulerState};
use super::tensor::Real;
use crate::error::{Error, Result};
use crate::rng;

/// Fixed-length LMFB inputs with their class labels.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LabeledSet<T> {
    pub frames: usize,
    pub inputs: Vec<Vec<T>>,
    pub labels: Vec<usize>,
}

impl<T: Real> LabeledSet<T> {
    pub fn new(frames: usize) -> Self {
        LabeledSet {
            frames,
            inputs: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, input: Vec<T>, label: usize) {
        self.inputs.push(input);
        self.labels.push(label);
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub scheduler: SchedulerConfig,
    /// Restore the parameters of the epoch with the lowest cross-validation loss.
    pub keep_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 128,
            max_epochs: 500,
            scheduler: SchedulerConfig::default(),
            keep_best: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub cv_loss: f64,
    pub train_acc: f64,
    pub cv_acc: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopReason {
    EarlyStop,
    MaxEpochs,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub scheduler: SchedulerState,
    pub stop: StopReason,
}

/// Mean NLL and accuracy of `model` on `set`.
pub fn evaluate_loss<T: Real>(model: &Model<T>, set: &LabeledSet<T>) -> Result<(f64, f64)> {
    let log_probs: Vec<Vec<T>> = set
        .inputs
        .par_iter()
        .map(|x| model.forward(x, set.frames))
        .collect::<Result<_>>()?;
    let loss = nll_loss(&log_probs, &set.labels)?.to_f64().unwrap_or(f64::NAN);
    let correct = log_probs.iter().zip(&set.labels).filter(|(lp, &l)| argmax(lp) == l).count();
    Ok((loss, correct as f64 / set.len() as f64))
}

/// Trains `model` in place. Per-band input normalization is fitted to the
/// training inputs first. Shuffling uses a stream derived from `seed` and
/// the epoch index, so a fixed seed reproduces the exact loss history.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &LabeledSet<T>,
    cv_set: &LabeledSet<T>,
    cfg: &TrainConfig,
    seed: u64,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    if train_set.is_empty() || cv_set.is_empty() {
        return Err(Error::Data("training and cross-validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be positive".into()));
    }
    cfg.scheduler.validate()?;
    model.fit_normalization(train_set.inputs.iter().map(|v| v.as_slice()));

    let mut sched = SchedulerState::new(cfg.scheduler);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best: Option<(f64, Model<T>)> = None;
    let mut stop = StopReason::MaxEpochs;

    for epoch in 0..cfg.max_epochs {
        let lr = sched.learning_rate();
        order.shuffle(&mut rng::stream(seed, &[0x7261_696e, epoch as u64]));
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for batch in order.chunks(cfg.batch_size) {
            let xs: Vec<&[T]> = batch.iter().map(|&i| train_set.inputs[i].as_slice()).collect();
            let ys: Vec<usize> = batch.iter().map(|&i| train_set.labels[i]).collect();
            let r = model.batch_gradients(&xs, &ys, train_set.frames)?;
            loss_sum += r.loss_sum;
            correct += r.correct;
            sgd_step(&mut model.params_mut(), &r.grads, lr)?;
        }
        let (cv_loss, cv_acc) = evaluate_loss(model, cv_set)?;
        if !cv_loss.is_finite() {
            return Err(Error::Numerical(format!("cross-validation loss is {cv_loss} at epoch {epoch}")));
        }
        let rec = EpochRecord {
            epoch: epoch + 1,
            train_loss: loss_sum / train_set.len() as f64,
            cv_loss,
            train_acc: correct as f64 / train_set.len() as f64,
            cv_acc,
            lr,
        };
        on_epoch(&rec);
        history.push(rec);
        if cfg.keep_best && best.as_ref().is_none_or(|(b, _)| cv_loss < *b) {
            best = Some((cv_loss, model.clone()));
        }
        match sched.step(cv_loss) {
            SchedulerAction::Stop => {
                stop = StopReason::EarlyStop;
                break;
            }
            SchedulerAction::DecayLr => log::debug!("epoch {}: lr -> {}", epoch + 1, sched.learning_rate()),
            SchedulerAction::Continue => {}
        }
    }
    if let Some((_, m)) = best {
        *model = m;
    }
    Ok(TrainOutcome {
        history,
        scheduler: sched,
        stop,
    })
}

pub fn write_history_csv(history: &[EpochRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,cv_loss,train_acc,cv_acc,lr")?;
    for r in history {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            r.epoch, r.train_loss, r.cv_loss, r.train_acc, r.cv_acc, r.lr
        )?;
    }
    Ok(())
}
