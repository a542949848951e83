//! Supervised pretraining with the LDAM loss.

use std::borrow::Cow;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::data::streams::{TRAIN_STREAM, VAL_STREAM};
use crate::data::{derive_seed, generate_frame_dataset, ClassTemplates, DataConfig, FrameDataset, ShiftRanges};
use crate::error::{Error, Result};
use crate::losses::{ldam_loss, ClassCounts};
use crate::metrics::{macro_f1, EvalResult};
use crate::model::{build_model, GradScope, ModelParams, ModelSpec};
use crate::optim::{AdamW, AdamWConfig};
use crate::tensor::argmax;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_step_epochs: usize,
    pub lr_gamma: f64,
    pub weight_decay: f64,
    #[serde(alias = "ldam_C")]
    pub ldam_c: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr: 1e-3,
            lr_step_epochs: 10,
            lr_gamma: 0.1,
            weight_decay: 0.01,
            ldam_c: 0.5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.lr_step_epochs == 0 {
            return Err(Error::InvalidConfig("epochs, batch_size and lr_step_epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.lr_gamma > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("lr, lr_gamma or weight_decay out of range".into()));
        }
        if !(self.ldam_c >= 0.0 && self.ldam_c.is_finite()) {
            return Err(Error::InvalidConfig(format!("ldam_C must be >= 0, got {}", self.ldam_c)));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a zero-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_gamma.powi((epoch / self.lr_step_epochs) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub loss: f64,
    pub f1: f64,
    pub lr: f64,
}

pub struct TrainOutput {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    /// Loss of every minibatch in order.
    pub step_losses: Vec<f32>,
}

pub fn write_log_jsonl<W: Write>(w: &mut W, log: &[EpochLog]) -> Result<()> {
    for rec in log {
        serde_json::to_writer(&mut *w, rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Exact per-class counts of `labels`; every class must occur.
pub fn class_counts(labels: &[usize], classes: usize, c: f32) -> Result<ClassCounts> {
    if labels.is_empty() {
        return Err(Error::InvalidCounts("empty dataset".into()));
    }
    let mut counts = vec![0usize; classes];
    for &l in labels {
        if l >= classes {
            return Err(Error::LabelOutOfRange { label: l, classes });
        }
        counts[l] += 1;
    }
    ClassCounts::new(counts, c)
}

/// Train a fresh model on one fixed dataset, reused every epoch.
pub fn train(spec: &ModelSpec, data: &FrameDataset, cfg: &TrainConfig) -> Result<TrainOutput> {
    train_from(build_model(spec, cfg.seed)?, cfg, |_| Ok(Cow::Borrowed(data)))
}

/// Minibatch AdamW over all trainable parameters with train-mode BN.
/// `epoch_data(e)` supplies the frames of epoch `e`; the LDAM class counts
/// are taken from epoch 0 and every later epoch must match them.
pub fn train_from<'a, F>(mut params: ModelParams, cfg: &TrainConfig, mut epoch_data: F) -> Result<TrainOutput>
where
    F: FnMut(usize) -> Result<Cow<'a, FrameDataset>>,
{
    cfg.validate()?;
    let first = epoch_data(0)?;
    if first.classes != params.spec().num_classes {
        return Err(Error::ShapeMismatch(format!(
            "dataset has {} classes, model {}",
            first.classes,
            params.spec().num_classes
        )));
    }
    let counts = class_counts(&first.labels, first.classes, cfg.ldam_c)?;
    let mut pending = Some(first);
    let mut opt = AdamW::new(AdamWConfig { lr: cfg.lr, weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7a41_0000);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut step_losses = Vec::new();
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        opt.set_lr(lr);
        let data = match pending.take() {
            Some(d) => d,
            None => epoch_data(epoch)?,
        };
        let epoch_counts = class_counts(&data.labels, data.classes, cfg.ldam_c)?;
        if epoch_counts.counts() != counts.counts() {
            return Err(Error::InvalidCounts(format!("epoch {epoch} class counts differ from epoch 0")));
        }
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        let mut preds = Vec::with_capacity(data.len());
        let mut seen = Vec::with_capacity(data.len());
        for idx in order.chunks(cfg.batch_size) {
            let diverged = |loss: f32| Error::DivergedLoss { epoch, step, loss };
            let batch = data.frames.select(idx)?;
            let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
            let mut tape = Tape::new();
            let out = params
                .forward(&mut tape, &batch, BnMode::Train, GradScope::Trainable)
                .map_err(|e| nan_as_divergence(e, diverged))?;
            let loss = ldam_loss(&mut tape, out.logits, &labels, &counts).map_err(|e| nan_as_divergence(e, diverged))?;
            let value = tape.value(loss).item().expect("scalar loss");
            let grads = tape.backward(loss).map_err(|e| nan_as_divergence(e, diverged))?;
            opt.step(&mut params, &grads).map_err(|e| nan_as_divergence(e, diverged))?;
            for (name, t) in out.stat_updates {
                params.set_tensor(&name, t)?;
            }
            loss_sum += value as f64 * idx.len() as f64;
            step_losses.push(value);
            preds.extend(tape.value(out.logits).rows().map(argmax));
            seen.extend(labels);
            step += 1;
        }
        let f1 = macro_f1(&preds, &seen, data.classes)?.macro_f1;
        log.push(EpochLog { epoch, loss: loss_sum / data.len() as f64, f1, lr });
    }
    Ok(TrainOutput { params, log, step_losses })
}

pub struct Pretrained {
    pub params: ModelParams,
    pub log: Vec<EpochLog>,
    pub step_losses: Vec<f32>,
    /// Eval-mode result on the un-shifted validation split.
    pub val: EvalResult,
}

/// Un-shifted validation frames, `val_per_class` per class.
pub fn validation_split(spec: &ModelSpec, train: &TrainConfig, data: &DataConfig) -> Result<FrameDataset> {
    let templates = ClassTemplates::generate(spec.num_classes, data.patch, data.template_seed);
    let counts = vec![data.val_per_class; spec.num_classes];
    generate_frame_dataset(&templates, spec.input_hw, &counts, &ShiftRanges::default(), data, derive_seed(train.seed, VAL_STREAM, 0))
}

/// Train a fresh model on a new synthetic training split every epoch, then
/// score it on the validation split.
pub fn pretrain(spec: &ModelSpec, train: &TrainConfig, data: &DataConfig) -> Result<Pretrained> {
    data.validate()?;
    let templates = ClassTemplates::generate(spec.num_classes, data.patch, data.template_seed);
    let out = train_from(build_model(spec, train.seed)?, train, |epoch| {
        let seed = derive_seed(train.seed, TRAIN_STREAM, epoch as u64);
        generate_frame_dataset(&templates, spec.input_hw, &data.train_counts, &data.train_shift, data, seed).map(Cow::Owned)
    })?;
    let val = validation_split(spec, train, data)?;
    let preds = out.params.predict(&val.frames, 64)?.argmax_rows();
    let val = macro_f1(&preds, &val.labels, spec.num_classes)?;
    Ok(Pretrained { params: out.params, log: out.log, step_losses: out.step_losses, val })
}

fn nan_as_divergence(e: Error, diverged: impl Fn(f32) -> Error) -> Error {
    match e {
        Error::NonFinite(_) | Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_) => diverged(f32::NAN),
        Error::NonFiniteLoss(v) => diverged(v),
        other => other,
    }
}
