//! Training loop: seeded mini-batch Adam with a validation-accuracy plateau
//! schedule and best-validation-loss checkpointing.
//!
//! The protocol: shuffle the training subset each epoch with a seeded RNG,
//! step on mini-batches (the last partial batch is kept), then score the
//! validation subset in inference mode. Validation *accuracy* drives the
//! learning-rate schedule — the rate is divided by `plateau_factor` after
//! `plateau_patience` consecutive epochs without improvement — while
//! validation *loss* picks the checkpoint that is restored when training
//! ends. Mixing the two criteria is deliberate; they answer different
//! questions (is the ranking still improving vs. which weights were best).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::Model;
use crate::data::{PatchDataset, Split};
use crate::engine::{bce_loss, zero_grads, Adam, Optimizer, Tape};
use crate::error::{Error, Result};

/// Hyperparameters of the training protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub initial_lr: f64,
    /// Learning-rate divisor applied on a plateau.
    pub plateau_factor: f64,
    /// Epochs without validation-accuracy improvement before a drop.
    pub plateau_patience: usize,
    pub max_epochs: usize,
    /// Stop when the best validation loss has not improved for this many
    /// epochs (None disables early stopping).
    pub early_stop_patience: Option<usize>,
    /// Training stops once the learning rate falls below this floor.
    pub min_lr: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            initial_lr: 1e-3,
            plateau_factor: 10.0,
            plateau_patience: 10,
            max_epochs: 200,
            early_stop_patience: None,
            min_lr: 1e-8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("train: batch_size must be positive".into()));
        }
        if !(self.initial_lr.is_finite() && self.initial_lr > 0.0) {
            return Err(Error::Config(format!(
                "train: initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        if !(self.plateau_factor.is_finite() && self.plateau_factor > 1.0) {
            return Err(Error::Config(format!(
                "train: plateau_factor must exceed 1, got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 {
            return Err(Error::Config(
                "train: plateau_patience must be positive".into(),
            ));
        }
        if self.max_epochs == 0 {
            return Err(Error::Config("train: max_epochs must be positive".into()));
        }
        if self.early_stop_patience == Some(0) {
            return Err(Error::Config(
                "train: early_stop_patience must be positive when set".into(),
            ));
        }
        if !(self.min_lr.is_finite() && self.min_lr > 0.0) {
            return Err(Error::Config(format!(
                "train: min_lr must be positive, got {}",
                self.min_lr
            )));
        }
        Ok(())
    }
}

/// Why the loop ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    LrFloor,
    EarlyStop,
}

/// One epoch's scoreboard. `lr` is the rate the epoch trained with.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub lr: f64,
}

/// Training history. The model the caller passed in holds the restored
/// best-validation-loss parameters when `train` returns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose checkpoint was restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped: StopReason,
}

impl TrainReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Format(format!("train report serialization failed: {e}")))
    }
}

/// Loss and scores of one dataset split, computed in inference mode with a
/// fixed batching order (deterministic, reproducible bit-for-bit).
pub struct SplitEval {
    pub loss: f64,
    pub accuracy: f64,
    pub scores: Vec<f32>,
    pub labels: Vec<u8>,
}

/// Runs the model over `split` in inference mode. Loss is the sample-mean
/// binary cross-entropy; accuracy uses the 0.5 threshold.
pub fn evaluate_split(
    model: &Model,
    dataset: &PatchDataset,
    split: Split,
    batch_size: usize,
) -> Result<SplitEval> {
    let indices = dataset.indices_of(split);
    if indices.is_empty() {
        return Err(Error::InsufficientData(format!(
            "no samples assigned to the {split} split"
        )));
    }
    let mut scores = Vec::with_capacity(indices.len());
    let mut labels = Vec::with_capacity(indices.len());
    let mut loss_sum = 0.0f64;
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = dataset.batch(chunk)?;
        let mut tape = Tape::inference();
        let pred = model.forward(&mut tape, &x, false)?;
        let loss = bce_loss(&mut tape, &pred, &y)?;
        loss_sum += loss.values()[0] as f64 * chunk.len() as f64;
        scores.extend(pred.values().iter().copied());
        labels.extend(y.values().iter().map(|&v| v as u8));
    }
    let correct = scores
        .iter()
        .zip(labels.iter())
        .filter(|(&s, &l)| (s >= 0.5) == (l == 1))
        .count();
    Ok(SplitEval {
        loss: loss_sum / indices.len() as f64,
        accuracy: correct as f64 / indices.len() as f64,
        scores,
        labels,
    })
}

/// Trains `model` on the dataset's train split per `config`, scoring the
/// validation split after every epoch. On return the model carries the
/// parameters (running statistics included) of the best-validation-loss
/// epoch.
pub fn train(model: &Model, dataset: &PatchDataset, config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    let mut train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(Error::InsufficientData(
            "training requires a non-empty train split (was the dataset split?)".into(),
        ));
    }
    if dataset.indices_of(Split::Val).is_empty() {
        return Err(Error::InsufficientData(
            "training requires a non-empty validation split".into(),
        ));
    }

    let params = model.parameters();
    let mut optimizer = Adam::new(config.initial_lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped: StopReason::MaxEpochs,
    };
    let mut checkpoint: Vec<Vec<f32>> = Vec::new();
    let mut best_val_acc = f64::NEG_INFINITY;
    let mut epochs_since_acc_improvement = 0usize;
    let mut epochs_since_loss_improvement = 0usize;

    for epoch in 1..=config.max_epochs {
        let lr = optimizer.learning_rate();
        train_idx.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (batch_no, chunk) in train_idx.chunks(config.batch_size).enumerate() {
            let (x, y) = dataset.batch(chunk)?;
            let mut tape = Tape::new();
            let pred = model.forward(&mut tape, &x, true)?;
            let loss = bce_loss(&mut tape, &pred, &y)?;
            let loss_val = loss.values()[0] as f64;
            if !loss_val.is_finite() {
                return Err(Error::NonFinite {
                    op: "train",
                    detail: format!(
                        "training loss became {loss_val} at epoch {epoch}, batch {batch_no}"
                    ),
                });
            }
            loss_sum += loss_val * chunk.len() as f64;
            zero_grads(&params);
            tape.backward(&loss)?;
            optimizer.step(&params);
        }
        let train_loss = loss_sum / train_idx.len() as f64;

        let val = evaluate_split(model, dataset, Split::Val, config.batch_size)?;
        if !val.loss.is_finite() {
            return Err(Error::NonFinite {
                op: "train",
                detail: format!("validation loss became {} at epoch {epoch}", val.loss),
            });
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss: val.loss,
            val_accuracy: val.accuracy,
            lr,
        });

        // Checkpoint on strictly better validation loss.
        if val.loss < report.best_val_loss {
            report.best_val_loss = val.loss;
            report.best_epoch = epoch;
            checkpoint = params.iter().map(|p| p.snapshot()).collect();
            epochs_since_loss_improvement = 0;
        } else {
            epochs_since_loss_improvement += 1;
        }

        // Plateau schedule on validation accuracy; improvement means a
        // strict increase by more than 1e-6.
        if val.accuracy > best_val_acc + 1e-6 {
            best_val_acc = val.accuracy;
            epochs_since_acc_improvement = 0;
        } else {
            epochs_since_acc_improvement += 1;
            if epochs_since_acc_improvement >= config.plateau_patience {
                optimizer.set_learning_rate(optimizer.learning_rate() / config.plateau_factor);
                epochs_since_acc_improvement = 0;
                if optimizer.learning_rate() < config.min_lr {
                    report.stopped = StopReason::LrFloor;
                    break;
                }
            }
        }

        if let Some(patience) = config.early_stop_patience {
            if epochs_since_loss_improvement >= patience {
                report.stopped = StopReason::EarlyStop;
                break;
            }
        }
    }

    // Restore the best checkpoint, running statistics included.
    for (p, snap) in params.iter().zip(checkpoint.iter()) {
        p.restore(snap)?;
    }
    Ok(report)
}
