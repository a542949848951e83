//! Test-time adaptation of the batch-norm affine parameters.
//!
//! TempT pulls the logits of the most flickery frame windows toward a
//! median-filtered copy of the initial logit trajectory. TENT minimizes the
//! softmax entropy of random frames. Both update only `bn_affine` entries and
//! always work on a copy of the base parameters.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape};
use crate::error::{Error, Result};
use crate::losses::{entropy_loss, temporal_consistency_loss, RegionSet};
use crate::metrics::macro_f1;
use crate::model::{GradScope, ModelParams, ParamGroup};
use crate::optim::{AdamW, AdamWConfig};
use crate::temporal::{decisions, median_filter, normalized_change_rate, sample_regions, select_regions_from, Region};
use crate::tensor::{argmax, Tensor};

/// Frames per chunk for full-sequence inference.
const PREDICT_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Tempt,
    Tent,
    None,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::None, Method::Tent, Method::Tempt];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Tempt => "tempt",
            Method::Tent => "tent",
            Method::None => "none",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tempt" => Ok(Method::Tempt),
            "tent" => Ok(Method::Tent),
            "none" => Ok(Method::None),
            other => Err(Error::InvalidConfig(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub method: Method,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub median_window: usize,
    pub region_window: usize,
    pub num_regions: usize,
    /// Upper bound on frames per optimization batch (TempT region frames,
    /// TENT random frames).
    pub batch_frames_cap: usize,
    pub seed: u64,
    /// Draw regions at random, weighted by change count, instead of taking
    /// the top-scoring windows.
    pub region_sample: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            method: Method::Tempt,
            steps: 10,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            median_window: 11,
            region_window: 32,
            num_regions: 4,
            batch_frames_cap: 128,
            seed: 0,
            region_sample: false,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("adapt lr must be > 0, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidConfig("adamw betas in [0,1), eps > 0, weight_decay >= 0 required".into()));
        }
        if self.median_window % 2 == 0 {
            return Err(Error::EvenWindow(self.median_window));
        }
        if self.region_window < 2 || self.num_regions < 1 || self.batch_frames_cap < 1 {
            return Err(Error::InvalidConfig("region_window >= 2, num_regions >= 1, batch_frames_cap >= 1 required".into()));
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdaptReport {
    pub method: Method,
    pub f1_before: Option<f64>,
    pub f1_after: Option<f64>,
    pub norm_changes_before: f64,
    pub norm_changes_after: f64,
    pub loss_trace: Vec<f64>,
    pub regions: Vec<Region>,
    pub adapted_frames: usize,
    /// FNV-1a digest of the median-filtered target, taken before and checked
    /// after the optimization loop.
    pub target_checksum: Option<String>,
    pub aborted: Option<String>,
    pub config: AdaptConfig,
}

pub struct AdaptOutcome {
    pub params: ModelParams,
    pub report: AdaptReport,
    pub logits_before: Tensor,
    pub logits_after: Tensor,
}

/// Names of the parameters adaptation may touch: the `bn_affine` group, in
/// name order.
pub fn trainable_subset(params: &ModelParams, method: Method) -> Result<Vec<String>> {
    if method == Method::None {
        return Ok(Vec::new());
    }
    let names: Vec<String> =
        params.entries().iter().filter(|(_, e)| e.group == ParamGroup::BnAffine && e.trainable).map(|(n, _)| n.clone()).collect();
    if names.is_empty() {
        return Err(Error::NoAdaptableParams);
    }
    Ok(names)
}

pub fn checksum(t: &Tensor) -> String {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in t.data() {
        for b in v.to_bits().to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    format!("{h:016x}")
}

/// Region frames in round-robin order across regions, truncated at `cap`,
/// then sorted.
fn region_frames(regions: &[Region], cap: usize) -> Vec<usize> {
    let mut iters: Vec<_> = regions.iter().map(|r| r.start..r.end).collect();
    let mut out = Vec::new();
    'outer: loop {
        let mut any = false;
        for it in iters.iter_mut() {
            if let Some(f) = it.next() {
                if out.len() == cap {
                    break 'outer;
                }
                out.push(f);
                any = true;
            }
        }
        if !any {
            break;
        }
    }
    out.sort_unstable();
    out
}

/// Adapt a copy of `params` to one video. `labels`, when given, only feed
/// the F1 fields of the report.
pub fn adapt_video(params: &ModelParams, frames: &Tensor, labels: Option<&[usize]>, cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    cfg.validate()?;
    let t = frames.dim(0);
    if let Some(l) = labels {
        if l.len() != t {
            return Err(Error::LengthMismatch(l.len(), t));
        }
    }
    let names = trainable_subset(params, cfg.method)?;
    let y_before = params.predict(frames, PREDICT_CHUNK)?;
    let preds_before = decisions(&y_before);

    let mut adapted = params.clone();
    let mut loss_trace = Vec::new();
    let mut regions = Vec::new();
    let mut adapted_frames = 0;
    let mut target_checksum = None;
    let mut aborted = None;
    let mut opt = AdamW::new(cfg.adamw());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scope = GradScope::Only(&names);

    match cfg.method {
        Method::None => {}
        Method::Tempt => {
            if t < 2 {
                return Err(Error::InvalidRange("TempT needs at least two frames".into()));
            }
            let target = median_filter(&y_before, cfg.median_window)?;
            let digest = checksum(&target);
            regions = if cfg.region_sample {
                sample_regions(&preds_before, cfg.region_window, cfg.num_regions, &mut rng)?
            } else {
                select_regions_from(&preds_before, cfg.region_window, cfg.num_regions)?
            };
            let idx = region_frames(&regions, cfg.batch_frames_cap);
            adapted_frames = idx.len();
            let batch = frames.select(&idx)?;
            let batch_target = target.select(&idx)?;
            for _ in 0..cfg.steps {
                let step = (|| -> Result<f32> {
                    let mut tape = Tape::new();
                    let out = adapted.forward(&mut tape, &batch, BnMode::Eval, scope)?;
                    let loss = temporal_consistency_loss(&mut tape, out.logits, &batch_target, &RegionSet::All)?;
                    let grads = tape.backward(loss)?;
                    opt.step(&mut adapted, &grads)?;
                    Ok(tape.value(loss).item().expect("scalar loss"))
                })();
                match step {
                    Ok(v) => loss_trace.push(v as f64),
                    Err(e) => {
                        aborted = Some(abort_reason(e)?);
                        break;
                    }
                }
            }
            assert_eq!(checksum(&target), digest, "adaptation target changed during optimization");
            target_checksum = Some(digest);
        }
        Method::Tent => {
            let n = cfg.batch_frames_cap.min(t);
            for _ in 0..cfg.steps {
                let mut idx = sample(&mut rng, t, n).into_vec();
                idx.sort_unstable();
                adapted_frames = n;
                let step = (|| -> Result<f32> {
                    let batch = frames.select(&idx)?;
                    let mut tape = Tape::new();
                    let out = adapted.forward(&mut tape, &batch, BnMode::Eval, scope)?;
                    let loss = entropy_loss(&mut tape, out.logits)?;
                    let grads = tape.backward(loss)?;
                    opt.step(&mut adapted, &grads)?;
                    Ok(tape.value(loss).item().expect("scalar loss"))
                })();
                match step {
                    Ok(v) => loss_trace.push(v as f64),
                    Err(e) => {
                        aborted = Some(abort_reason(e)?);
                        break;
                    }
                }
            }
        }
    }

    if aborted.is_some() {
        adapted = params.clone();
    }
    let y_after = if cfg.method == Method::None || aborted.is_some() || cfg.steps == 0 {
        y_before.clone()
    } else {
        adapted.predict(frames, PREDICT_CHUNK)?
    };
    let preds_after = decisions(&y_after);
    let k = params.spec().num_classes;
    let f1 = |p: &[usize]| -> Result<Option<f64>> { labels.map(|l| macro_f1(p, l, k).map(|r| r.macro_f1)).transpose() };
    let report = AdaptReport {
        method: cfg.method,
        f1_before: f1(&preds_before)?,
        f1_after: f1(&preds_after)?,
        norm_changes_before: normalized_change_rate(&preds_before),
        norm_changes_after: normalized_change_rate(&preds_after),
        loss_trace,
        regions,
        adapted_frames,
        target_checksum,
        aborted,
        config: cfg.clone(),
    };
    Ok(AdaptOutcome { params: adapted, report, logits_before: y_before, logits_after: y_after })
}

/// Numerical blow-ups abort the run with a diagnostic; anything else is a
/// real error.
fn abort_reason(e: Error) -> Result<String> {
    match e {
        Error::NonFiniteLoss(_) | Error::NonFinite(_) | Error::NonFiniteActivation(_) | Error::NonFiniteGradient(_) => {
            Ok(e.to_string())
        }
        other => Err(other),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ViolationKind {
    /// A frozen weight changed.
    ParamChanged,
    /// A running statistic changed.
    StatsLeak,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub name: String,
    pub kind: ViolationKind,
}

/// Every entry outside `bn_affine` whose bytes differ between the two
/// parameter sets.
pub fn isolate_check(before: &ModelParams, after: &ModelParams) -> Result<Vec<Violation>> {
    let (a, b) = (before.entries(), after.entries());
    if a.len() != b.len() {
        return Err(Error::ArchMismatch(format!("{} vs {} entries", a.len(), b.len())));
    }
    let mut out = Vec::new();
    for ((na, ea), (nb, eb)) in a.iter().zip(b) {
        if na != nb || ea.tensor.shape() != eb.tensor.shape() || ea.group != eb.group {
            return Err(Error::ArchMismatch(format!("{na} vs {nb}")));
        }
        let same = ea.tensor.data().iter().zip(eb.tensor.data()).all(|(x, y)| x.to_bits() == y.to_bits());
        if same || ea.group == ParamGroup::BnAffine {
            continue;
        }
        let kind = if ea.group == ParamGroup::BnStats { ViolationKind::StatsLeak } else { ViolationKind::ParamChanged };
        out.push(Violation { name: na.clone(), kind });
    }
    Ok(out)
}

/// Per-frame logits before and after adaptation as CSV: frame id, `k`
/// logits before, `k` logits after, argmax before and after.
pub fn write_trace_csv<W: Write>(w: &mut W, before: &Tensor, after: &Tensor) -> Result<()> {
    if before.shape() != after.shape() || before.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("trace {:?} vs {:?}", before.shape(), after.shape())));
    }
    let k = before.dim(1);
    let mut header = vec!["frame_id".to_owned()];
    header.extend((0..k).map(|j| format!("before_{j}")));
    header.extend((0..k).map(|j| format!("after_{j}")));
    header.extend(["argmax_before".to_owned(), "argmax_after".to_owned()]);
    writeln!(w, "{}", header.join(","))?;
    for (i, (rb, ra)) in before.rows().zip(after.rows()).enumerate() {
        let mut line = i.to_string();
        for v in rb.iter().chain(ra) {
            line.push(',');
            line.push_str(&v.to_string());
        }
        writeln!(w, "{line},{},{}", argmax(rb), argmax(ra))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn r(start: usize, end: usize) -> Region {
        Region { start, end, change_count: 0 }
    }

    #[test]
    fn round_robin_truncation() {
        assert_eq!(region_frames(&[r(0, 4), r(10, 12)], 5), vec![0, 1, 2, 10, 11]);
        assert_eq!(region_frames(&[r(0, 4), r(10, 12)], 100), vec![0, 1, 2, 3, 10, 11]);
        assert_eq!(region_frames(&[r(0, 3), r(5, 8), r(9, 12)], 4), vec![0, 1, 5, 9]);
    }

    #[test]
    fn method_parsing() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert!("adabn".parse::<Method>().is_err());
    }

    #[test]
    fn checksum_sees_every_bit() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        let b = Tensor::from_vec(vec![1.0, f32::from_bits(2.0f32.to_bits() + 1)]);
        assert_ne!(checksum(&a), checksum(&b));
    }
}
