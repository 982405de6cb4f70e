use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{classification_report, ConfusionMatrix, EvalReport};
use super::optim::{adam_step, cross_entropy, AdamState};
use crate::data::{make_batches, AugmentSpec, BatchOptions, ImageSource, LabeledDataset, Split};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, LayerKind, Model, WeightStore};
use crate::ops::{softmax_cross_entropy_grad, Mode};
use crate::tensor::{argmax, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Epochs without validation-loss improvement before stopping; `None`
    /// or `Some(0)` disables early stopping.
    pub early_stop_patience: Option<usize>,
    pub seed: u64,
    pub freeze_first_n: usize,
    pub augment: Option<AugmentSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 16,
            learning_rate: 1e-3,
            batch_size: 32,
            early_stop_patience: None,
            seed: 0,
            freeze_first_n: 0,
            augment: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }

    fn patience(&self) -> Option<usize> {
        self.early_stop_patience.filter(|&p| p > 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose weights the model holds after early stopping.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,train_acc,val_loss,val_acc\n");
        for r in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{},{}",
                r.epoch, r.train_loss, r.train_acc, r.val_loss, r.val_acc
            );
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Loss, accuracy and predictions over one split.
#[derive(Debug, Clone)]
pub struct SplitScore {
    pub loss: f64,
    pub correct: usize,
    pub total: usize,
    pub truth: Vec<usize>,
    pub predicted: Vec<usize>,
}

impl SplitScore {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

fn softmax_index(model: &Model) -> Result<usize> {
    match model.layers().last() {
        Some(l) if l.kind == LayerKind::Softmax && model.layers().len() >= 2 => {
            Ok(model.layers().len() - 1)
        }
        _ => Err(Error::Config("model must end with a softmax layer".into())),
    }
}

fn check_compatible(model: &Model, ds: &LabeledDataset, source: &ImageSource) -> Result<()> {
    softmax_index(model)?;
    if model.num_outputs() != ds.num_classes() {
        return Err(Error::Config(format!(
            "model predicts {} classes but the dataset has {}",
            model.num_outputs(),
            ds.num_classes()
        )));
    }
    if source.target() != model.input_shape() {
        return Err(Error::Config(format!(
            "images load at {} but the model expects {}",
            source.target(),
            model.input_shape()
        )));
    }
    Ok(())
}

/// Probabilities as `B×K`.
fn rows(output: &Tensor, k: usize) -> Result<Tensor> {
    output.reshaped(&[output.len() / k, k])
}

fn tally(probs: &Tensor, labels: &Tensor, k: usize, truth: &mut Vec<usize>, predicted: &mut Vec<usize>) -> usize {
    let mut correct = 0;
    for (p, y) in probs.data().chunks_exact(k).zip(labels.data().chunks_exact(k)) {
        let (t, q) = (argmax(y), argmax(p));
        correct += usize::from(t == q);
        truth.push(t);
        predicted.push(q);
    }
    correct
}

/// Inference over a split in dataset order, without augmentation.
pub fn score_split(
    model: &Model,
    ds: &LabeledDataset,
    split: Split,
    source: &ImageSource,
    batch_size: usize,
) -> Result<SplitScore> {
    check_compatible(model, ds, source)?;
    let k = ds.num_classes();
    let mut score = SplitScore {
        loss: 0.0,
        correct: 0,
        total: 0,
        truth: Vec::new(),
        predicted: Vec::new(),
    };
    for batch in make_batches(ds, split, BatchOptions::sequential(batch_size), source)? {
        let batch = batch?;
        let probs = rows(&model.predict(&batch.images)?, k)?;
        score.loss += cross_entropy(&probs, &batch.labels)? * batch.len() as f64;
        score.correct += tally(&probs, &batch.labels, k, &mut score.truth, &mut score.predicted);
        score.total += batch.len();
    }
    score.loss /= score.total as f64;
    Ok(score)
}

/// Confusion matrix and per-class metrics of argmax predictions on a split.
pub fn evaluate(
    model: &Model,
    ds: &LabeledDataset,
    split: Split,
    source: &ImageSource,
    batch_size: usize,
) -> Result<EvalReport> {
    let score = score_split(model, ds, split, source, batch_size)?;
    let m = ConfusionMatrix::from_predictions(ds.num_classes(), &score.truth, &score.predicted)?;
    classification_report(&m, &ds.class_names)
}

fn locate(err: Error, epoch: usize, batch: usize) -> Error {
    match err {
        Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, batch {batch}: {m}")),
        other => other,
    }
}

/// Adam on mean categorical cross-entropy. Each epoch runs shuffled
/// (optionally augmented) train batches and then a validation pass. With
/// early stopping the weights of the best validation epoch are restored.
pub fn train(
    model: &mut Model,
    ds: &LabeledDataset,
    cfg: &TrainConfig,
    source: &ImageSource,
) -> Result<TrainLog> {
    cfg.validate()?;
    check_compatible(model, ds, source)?;
    model.set_trainable_boundary(cfg.freeze_first_n)?;
    let first = model.first_trainable_layer().ok_or_else(|| {
        Error::Config(format!(
            "no trainable parameters with the first {} layers frozen",
            cfg.freeze_first_n
        ))
    })?;
    for split in [Split::Train, Split::Val] {
        if ds.split_len(split) == 0 {
            return Err(Error::Data(format!("split {split} is empty")));
        }
    }
    let logits = softmax_index(model)? - 1;
    let k = ds.num_classes();
    let mut adam = AdamState::new();
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, WeightStore)> = None;
    let mut waited = 0;

    for epoch in 1..=cfg.epochs {
        let opts = BatchOptions {
            batch_size: cfg.batch_size,
            shuffle: Some(cfg.seed),
            epoch: epoch as u64,
            augment: cfg.augment,
        };
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0, 0);
        let (mut truth, mut predicted) = (Vec::new(), Vec::new());
        for (b, batch) in make_batches(ds, Split::Train, opts, source)?.enumerate() {
            let batch = batch?;
            let fwd = ForwardOptions {
                mode: Mode::Train,
                cache_from: first,
                capture: None,
                seed: cfg.seed ^ ((epoch as u64) << 32 | b as u64),
            };
            let pass = model.forward(&batch.images, fwd).map_err(|e| locate(e, epoch, b))?;
            let probs = rows(&pass.output, k)?;
            let loss = cross_entropy(&probs, &batch.labels)?;
            if !loss.is_finite() {
                return Err(Error::Numeric(format!(
                    "epoch {epoch}, batch {b}: loss is {loss}"
                )));
            }
            loss_sum += loss * batch.len() as f64;
            correct += tally(&probs, &batch.labels, k, &mut truth, &mut predicted);
            seen += batch.len();

            let grad = softmax_cross_entropy_grad(&probs, &batch.labels)?.reshape(pass.output.shape())?;
            let back = model.backward(&pass, grad, logits, first, true, false)?;
            for (name, g) in back.grads.iter() {
                g.check_finite(name).map_err(|e| locate(e, epoch, b))?;
            }
            adam_step(model.params_mut(), &back.grads, &mut adam, cfg.learning_rate)?;
            model.apply_bn_updates(&pass).map_err(|e| locate(e, epoch, b))?;
        }
        let val = score_split(model, ds, Split::Val, source, cfg.batch_size)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_loss: val.loss,
            val_acc: val.accuracy(),
        };
        log::info!(
            "epoch {epoch}/{}: loss {:.4} acc {:.4} val_loss {:.4} val_acc {:.4}",
            cfg.epochs,
            record.train_loss,
            record.train_acc,
            record.val_loss,
            record.val_acc
        );
        log.epochs.push(record);

        if let Some(patience) = cfg.patience() {
            if best.as_ref().is_none_or(|(l, _, _)| val.loss < *l) {
                best = Some((val.loss, epoch, model.params().clone()));
                waited = 0;
            } else {
                waited += 1;
                if waited >= patience {
                    log.stopped_early = true;
                    break;
                }
            }
        }
    }
    if let Some((_, epoch, params)) = best {
        *model.params_mut() = params;
        log.best_epoch = Some(epoch);
    }
    Ok(log)
}
