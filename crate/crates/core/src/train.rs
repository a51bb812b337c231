//! Summed per-annotator cross-entropy with missing-label masking, and the
//! AdamW / warmup-cosine / early-stopping training loop.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{majority_label, DataError, Dataset, Label, Sample};
use crate::model::{BatchOutput, Model, ModelError, PredictionSet, Variant};
use crate::numerics::{
    adamw_step, clip_global_norm, lr_schedule, NumericsError, OptimizerState, ParamStore, Tape, Var,
};
use crate::seed::rng_for;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-12;
const EVAL_CHUNK: usize = 256;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    Config(String),
    #[error("class {class} out of range for {classes} classes")]
    ClassRange { class: usize, classes: usize },
    #[error("every label of the sample is missing")]
    AllMissing,
    #[error("annotator {0} has no training labels")]
    StarvedAnnotator(usize),
    #[error("{0} set is empty")]
    EmptySet(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFinite { epoch: usize, batch: usize },
    #[error("model variant {model} does not match configured variant {config}")]
    VariantMismatch { model: Variant, config: Variant },
    #[error("dataset has {dataset} annotators/{classes} classes, model expects {model}/{model_classes}")]
    Incompatible { dataset: usize, classes: usize, model: usize, model_classes: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub max_grad_norm: f64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub variant: Variant,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 200,
            patience: 25,
            batch_size: 32,
            base_lr: 1e-4,
            weight_decay: 0.01,
            max_grad_norm: 1.0,
            warmup_frac: 0.2,
            seed: 0,
            variant: Variant::Full,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let err = |m: String| Err(TrainError::Config(m));
        if self.max_epochs == 0 {
            return err("maxEpochs must be positive".into());
        }
        if self.patience == 0 || self.patience >= self.max_epochs.max(2) {
            return err(format!("patience {} must lie in [1, maxEpochs={})", self.patience, self.max_epochs));
        }
        if self.batch_size == 0 {
            return err("batchSize must be at least 1".into());
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return err(format!("baseLr must be finite and non-negative, got {}", self.base_lr));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return err(format!("weightDecay must be finite and non-negative, got {}", self.weight_decay));
        }
        if !(self.max_grad_norm > 0.0) {
            return err(format!("maxGradNorm must be positive, got {}", self.max_grad_norm));
        }
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return err(format!("warmupFrac must lie in (0, 1), got {}", self.warmup_frac));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_avg_acc: f64,
    /// Learning rate of the last step in the epoch.
    pub lr: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with minimal validation loss.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best(&self) -> &EpochRecord {
        &self.epochs[self.best_epoch - 1]
    }

    pub fn best_val_loss(&self) -> f64 {
        self.best().val_loss
    }

    /// `epoch,train_loss,val_loss,val_avg_acc,lr` with 17 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,val_avg_acc,lr\n");
        for e in &self.epochs {
            writeln!(out, "{},{:.16e},{:.16e},{:.16e},{:.16e}", e.epoch, e.train_loss, e.val_loss, e.val_avg_acc, e.lr)
                .expect("write to string");
        }
        out
    }
}

/// `−ln(max(probs[class], 1e-12))`.
pub fn cross_entropy(probs: &[f64], class: usize) -> Result<f64, TrainError> {
    let p = probs.get(class).ok_or(TrainError::ClassRange { class, classes: probs.len() })?;
    Ok(-if *p < PROB_FLOOR { PROB_FLOOR } else { *p }.ln())
}

/// Sum over annotators with a label of their cross-entropy.
pub fn total_loss_value(pred: &PredictionSet, labels: &[Label]) -> Result<f64, TrainError> {
    if labels.iter().all(Option::is_none) {
        return Err(TrainError::AllMissing);
    }
    let mut total = 0.0;
    for (k, l) in labels.iter().enumerate() {
        if let Some(c) = *l {
            total += cross_entropy(pred.probs.row(k), c)?;
        }
    }
    Ok(total)
}

/// The same sum recorded on the tape for a `rows × C` probability node.
/// Missing labels contribute zero and receive zero gradient.
pub fn total_loss(tape: &mut Tape, probs: Var, labels: &[Label]) -> Result<Var, TrainError> {
    if labels.iter().all(Option::is_none) {
        return Err(TrainError::AllMissing);
    }
    let classes = tape.value(probs).cols();
    if let Some(&c) = labels.iter().flatten().find(|&&c| c >= classes) {
        return Err(TrainError::ClassRange { class: c, classes });
    }
    Ok(tape.neg_log_pick(probs, labels.to_vec(), PROB_FLOOR)?)
}

/// Mean over samples of [`total_loss`] for a batch forward output.
pub fn batch_loss(tape: &mut Tape, out: &BatchOutput, targets: &[Vec<Label>]) -> Result<Var, TrainError> {
    let rows = out.rows_per_sample;
    let classes = tape.value(out.probs).cols();
    let mut flat = Vec::with_capacity(targets.len() * rows);
    for t in targets {
        if t.len() != rows {
            return Err(TrainError::Config(format!("target has {} entries, expected {rows}", t.len())));
        }
        if t.iter().all(Option::is_none) {
            return Err(TrainError::AllMissing);
        }
        flat.extend_from_slice(t);
    }
    if let Some(&c) = flat.iter().flatten().find(|&&c| c >= classes) {
        return Err(TrainError::ClassRange { class: c, classes });
    }
    let sum = tape.neg_log_pick(out.probs, flat, PROB_FLOOR)?;
    Ok(tape.scale(sum, 1.0 / targets.len() as f64)?)
}

/// Training targets for `variant`: annotator labels, or the majority label
/// for consensus models.
pub fn targets_for(variant: Variant, sample: &Sample) -> Result<Vec<Label>, TrainError> {
    if variant.is_consensus() {
        Ok(vec![Some(majority_label(&sample.labels)?)])
    } else {
        Ok(sample.labels.clone())
    }
}

/// Mean per-sample loss and average accuracy of `model` on `data`.
///
/// Accuracy is averaged over annotators with at least one label (or is the
/// consensus accuracy for consensus models).
pub fn validation_metrics(model: &Model, data: &Dataset) -> Result<(f64, f64), TrainError> {
    let variant = model.variant();
    let rows = if variant.is_consensus() { 1 } else { data.num_annotators };
    let mut loss_sum = 0.0;
    let mut counted = 0usize;
    let mut hits = vec![0usize; rows];
    let mut seen = vec![0usize; rows];
    for chunk in data.samples.chunks(EVAL_CHUNK) {
        let raws: Vec<_> = chunk.iter().map(|s| &s.raw_tokens).collect();
        let preds = model.predict_batch(&raws)?;
        for (s, p) in chunk.iter().zip(&preds) {
            if s.labels.iter().all(Option::is_none) {
                continue;
            }
            let targets = targets_for(variant, s)?;
            loss_sum += total_loss_value(p, &targets)?;
            counted += 1;
            for (k, (t, guess)) in targets.iter().zip(p.labels()).enumerate() {
                if let Some(t) = t {
                    seen[k] += 1;
                    hits[k] += usize::from(*t == guess);
                }
            }
        }
    }
    if counted == 0 {
        return Err(TrainError::EmptySet("validation"));
    }
    let accs: Vec<f64> = hits.iter().zip(&seen).filter(|(_, s)| **s > 0).map(|(h, s)| *h as f64 / *s as f64).collect();
    Ok((loss_sum / counted as f64, accs.iter().sum::<f64>() / accs.len() as f64))
}

fn check_compatible(model: &Model, d: &Dataset) -> Result<(), TrainError> {
    let cfg = model.config();
    if d.num_annotators != cfg.num_annotators || d.num_classes != cfg.num_classes {
        return Err(TrainError::Incompatible {
            dataset: d.num_annotators,
            classes: d.num_classes,
            model: cfg.num_annotators,
            model_classes: cfg.num_classes,
        });
    }
    Ok(())
}

/// Trains `model` and returns the weights of the best validation epoch.
pub fn train(mut model: Model, train_set: &Dataset, val_set: &Dataset, cfg: &TrainConfig) -> Result<(Model, TrainHistory), TrainError> {
    cfg.validate()?;
    if model.variant() != cfg.variant {
        return Err(TrainError::VariantMismatch { model: model.variant(), config: cfg.variant });
    }
    check_compatible(&model, train_set)?;
    check_compatible(&model, val_set)?;
    if let Some(&k) = train_set.starved_annotators().first() {
        return Err(TrainError::StarvedAnnotator(k));
    }
    let usable: Vec<(&Sample, Vec<Label>)> = train_set
        .samples
        .iter()
        .filter(|s| s.labels.iter().any(Option::is_some))
        .map(|s| targets_for(cfg.variant, s).map(|t| (s, t)))
        .collect::<Result<_, _>>()?;
    if usable.is_empty() {
        return Err(TrainError::EmptySet("training"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation"));
    }

    let batches_per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches_per_epoch;
    let mut state = OptimizerState::new(model.params(), cfg.base_lr, cfg.weight_decay, cfg.max_grad_norm);
    let mut rng = rng_for(cfg.seed, "shuffle");
    let mut order: Vec<usize> = (0..usable.len()).collect();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut since_best = 0;
    let mut stopped_early = false;
    let mut step = 0;
    let mut lr = 0.0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let raws: Vec<_> = idx.iter().map(|&i| &usable[i].0.raw_tokens).collect();
            let targets: Vec<Vec<Label>> = idx.iter().map(|&i| usable[i].1.clone()).collect();
            let mut tape = Tape::new();
            let out = model.forward_batch(&mut tape, &raws)?;
            let loss = batch_loss(&mut tape, &out, &targets)?;
            let value = tape.value(loss).get(0, 0);
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1 });
            }
            loss_sum += value * idx.len() as f64;
            let mut grads = tape.backward(loss)?.into_params();
            if !clip_global_norm(&mut grads, cfg.max_grad_norm)?.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: b + 1 });
            }
            step += 1;
            lr = lr_schedule(step, total_steps, cfg.warmup_frac, cfg.base_lr)?;
            adamw_step(model.params_mut(), &grads, &mut state, lr)?;
        }
        let (val_loss, val_avg_acc) = validation_metrics(&model, val_set)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0 });
        }
        history.push(EpochRecord { epoch, train_loss: loss_sum / usable.len() as f64, val_loss, val_avg_acc, lr });

        if best.as_ref().map_or(true, |(_, v, _)| val_loss < *v) {
            best = Some((epoch, val_loss, model.params().clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }

    let (best_epoch, _, params) = best.expect("at least one epoch");
    model.set_params(params);
    Ok((model, TrainHistory { epochs: history, best_epoch, stopped_early }))
}
