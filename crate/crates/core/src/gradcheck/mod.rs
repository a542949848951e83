//! Central finite-difference check of the analytic gradients.
//!
//! The tape's f32 gradients are compared with central differences of an
//! independent f64 forward ([`reference`]). Entries whose ±step crosses a
//! relu kink are skipped and counted.

pub mod reference;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Gradients, Tape};
use crate::error::{Error, Result};
use crate::losses::{cross_entropy, entropy_loss, ldam_loss, temporal_consistency_loss, ClassCounts, RegionSet};
use crate::model::{build_model, GradScope, ModelParams, ModelSpec, ParamGroup, StageSpec};
use crate::temporal::median_filter;
use crate::tensor::Tensor;

use reference::{RefEval, RefLoss, RefParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckLoss {
    Ce,
    Ldam,
    Entropy,
    Tempt,
}

impl CheckLoss {
    pub const ALL: [CheckLoss; 4] = [CheckLoss::Ce, CheckLoss::Ldam, CheckLoss::Entropy, CheckLoss::Tempt];

    pub fn as_str(self) -> &'static str {
        match self {
            CheckLoss::Ce => "ce",
            CheckLoss::Ldam => "ldam",
            CheckLoss::Entropy => "entropy",
            CheckLoss::Tempt => "tempt",
        }
    }
}

impl std::str::FromStr for CheckLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CheckLoss::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown loss {s:?}, expected ce|ldam|entropy|tempt")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub step: f32,
    pub tolerance: f64,
    /// Lower bound on the denominator of the relative error.
    pub floor: f64,
    pub batch: usize,
    pub seed: u64,
    /// Check at most this many evenly spaced entries per tensor.
    pub max_entries_per_tensor: Option<usize>,
    /// Deliberately corrupt one analytic gradient (checker self-test).
    #[serde(skip)]
    pub inject_fault: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-3,
            tolerance: 1e-3,
            floor: 1e-3,
            batch: 6,
            seed: 0,
            max_entries_per_tensor: None,
            inject_fault: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub name: String,
    pub entries: usize,
    pub checked: usize,
    /// Entries skipped because a relu input changed sign within ±step.
    pub kinks: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub loss: CheckLoss,
    pub step: f32,
    pub tolerance: f64,
    pub max_rel_err: f64,
    /// Relative gap between the tape's loss and the reference loss.
    pub forward_gap: f64,
    pub passed: bool,
    /// Worst relative error per parameter group.
    pub groups: BTreeMap<String, f64>,
    pub tensors: Vec<TensorCheck>,
}

impl GradcheckReport {
    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors.iter().max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

/// Small enough for a full per-entry check in well under a second.
pub fn tiny_spec() -> ModelSpec {
    ModelSpec {
        input_hw: 8,
        in_channels: 3,
        stages: vec![StageSpec { channels: 4, blocks: 1 }, StageSpec { channels: 6, blocks: 1 }],
        num_classes: 4,
        head_hidden: 16,
        head_scale: 16.0,
    }
}

/// A tiny model whose batch-norm layers are far from the identity, so the
/// affine parameters and running statistics all matter.
pub fn tiny_model(seed: u64) -> Result<ModelParams> {
    let mut params = build_model(&tiny_spec(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6bad);
    let names: Vec<(String, ParamGroup)> = params.entries().iter().map(|(n, e)| (n.clone(), e.group)).collect();
    for (name, group) in names {
        let t = params.tensor(&name)?;
        let (lo, hi) = match (group, name.rsplit('.').next()) {
            (ParamGroup::BnAffine, Some("gamma")) => (0.5, 1.5),
            (ParamGroup::BnAffine, _) => (-0.5, 0.5),
            (ParamGroup::BnStats, Some("running_mean")) => (-0.3, 0.3),
            (ParamGroup::BnStats, _) => (0.5, 1.5),
            _ => continue,
        };
        let data = (0..t.len()).map(|_| rng.random_range(lo..hi)).collect();
        let shape = t.shape().to_vec();
        params.set_tensor(&name, Tensor::new(shape, data)?)?;
    }
    Ok(params)
}

/// Fixed inputs that define one scalar objective of the parameters.
struct Problem {
    loss: CheckLoss,
    batch: Tensor,
    labels: Vec<usize>,
    counts: ClassCounts,
    target: Tensor,
    regions: RegionSet,
}

impl Problem {
    fn new(params: &ModelParams, loss: CheckLoss, cfg: &GradcheckConfig) -> Result<Self> {
        let spec = params.spec();
        let (n, k, hw) = (cfg.batch.max(4), spec.num_classes, spec.input_hw);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let data: Vec<f32> = (0..n * spec.in_channels * hw * hw).map(|_| StandardNormal.sample(&mut rng)).collect();
        let batch = Tensor::new([n, spec.in_channels, hw, hw], data)?;
        let labels: Vec<usize> = (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect();
        let counts = ClassCounts::new((0..k).map(|_| rng.random_range(5..200)).collect(), 1.5)?;
        // Smoothed logits plus a random offset, so the target is not a
        // fixed point of the loss.
        let y = params.predict(&batch, n)?;
        let offset: Vec<f32> = (0..n * k).map(|_| StandardNormal.sample(&mut rng)).collect();
        let target = median_filter(&y, 3)?.add(&Tensor::new([n, k], offset)?)?;
        let regions = RegionSet::Ranges(vec![0..2, 3..n]);
        Ok(Problem { loss, batch, labels, counts, target, regions })
    }

    fn mode(&self) -> BnMode {
        match self.loss {
            CheckLoss::Ce | CheckLoss::Ldam => BnMode::Train,
            CheckLoss::Entropy | CheckLoss::Tempt => BnMode::Eval,
        }
    }

    fn record(&self, params: &ModelParams, tape: &mut Tape, scope: GradScope<'_>) -> Result<crate::autodiff::Var> {
        let out = params.forward(tape, &self.batch, self.mode(), scope)?;
        match self.loss {
            CheckLoss::Ce => cross_entropy(tape, out.logits, &self.labels),
            CheckLoss::Ldam => ldam_loss(tape, out.logits, &self.labels, &self.counts),
            CheckLoss::Entropy => entropy_loss(tape, out.logits),
            CheckLoss::Tempt => temporal_consistency_loss(tape, out.logits, &self.target, &self.regions),
        }
    }

    fn value(&self, params: &ModelParams) -> Result<f32> {
        let mut tape = Tape::new();
        let loss = self.record(params, &mut tape, GradScope::None)?;
        Ok(tape.value(loss).item().expect("scalar loss"))
    }

    fn reference(&self, p: &RefParams) -> Result<RefEval> {
        let n = self.batch.dim(0);
        let eval = |loss: RefLoss<'_>| reference::evaluate(p, self.batch.data(), n, self.mode(), &loss);
        Ok(match self.loss {
            CheckLoss::Ce => eval(RefLoss::Xent { labels: &self.labels, margins: &vec![0.0; self.counts.counts().len()] }),
            CheckLoss::Ldam => {
                let margins: Vec<f64> = self.counts.margins().iter().map(|&m| m as f64).collect();
                eval(RefLoss::Xent { labels: &self.labels, margins: &margins })
            }
            CheckLoss::Entropy => eval(RefLoss::Entropy),
            CheckLoss::Tempt => {
                let rows = self.regions.frames(n)?;
                let target: Vec<f64> = self.target.data().iter().map(|&v| v as f64).collect();
                eval(RefLoss::Squared { rows: &rows, target: &target })
            }
        })
    }

    fn gradients(&self, params: &ModelParams) -> Result<Gradients> {
        let mut tape = Tape::new();
        let loss = self.record(params, &mut tape, GradScope::Trainable)?;
        tape.backward(loss)
    }
}

/// Compare the analytic gradient of every trainable entry against
/// `(L(w+h) − L(w−h)) / 2h` of the f64 reference. The per-entry error is
/// `|a − n| / max(|a|, |n|, floor)`.
pub fn gradcheck(params: &ModelParams, loss: CheckLoss, cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    if !(cfg.step > 0.0) || !(cfg.floor > 0.0) {
        return Err(Error::InvalidConfig("gradcheck step and floor must be positive".into()));
    }
    let problem = Problem::new(params, loss, cfg)?;
    let grads = problem.gradients(params)?;
    let mut reference = RefParams::from_params(params);
    let tape_loss = problem.value(params)? as f64;
    let ref_loss = problem.reference(&reference)?.loss;
    let forward_gap = (tape_loss - ref_loss).abs() / ref_loss.abs().max(1.0);

    let h = cfg.step as f64;
    let mut tensors = Vec::new();
    let names: Vec<String> = params.entries().iter().filter(|(_, e)| e.trainable).map(|(n, _)| n.clone()).collect();
    for name in names {
        let mut analytic = grads.get(&name).cloned().ok_or_else(|| Error::ArchMismatch(format!("no gradient for {name}")))?;
        if cfg.inject_fault && name == "head.out.weight" {
            analytic.data_mut()[0] *= 1.05;
            analytic.data_mut()[0] += 0.05;
        }
        let len = analytic.len();
        let indices: Vec<usize> = match cfg.max_entries_per_tensor {
            Some(m) if m < len => (0..m).map(|i| i * len / m).collect(),
            _ => (0..len).collect(),
        };
        let mut check = TensorCheck {
            name: name.clone(),
            entries: len,
            checked: 0,
            kinks: 0,
            max_rel_err: 0.0,
            max_abs_err: 0.0,
            worst_index: 0,
        };
        for i in indices {
            let w = reference.get(&name)[i];
            reference.set(&name, i, w + h);
            let plus = problem.reference(&reference)?;
            reference.set(&name, i, w - h);
            let minus = problem.reference(&reference)?;
            reference.set(&name, i, w);
            if plus.relu_signs != minus.relu_signs {
                check.kinks += 1;
                continue;
            }
            check.checked += 1;
            let numeric = (plus.loss - minus.loss) / (2.0 * h);
            let a = analytic.data()[i] as f64;
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(cfg.floor);
            check.max_abs_err = check.max_abs_err.max(abs);
            if rel > check.max_rel_err {
                check.max_rel_err = rel;
                check.worst_index = i;
            }
        }
        tensors.push(check);
    }
    let max_rel_err = tensors.iter().map(|t| t.max_rel_err).fold(0.0, f64::max);
    let mut groups = BTreeMap::new();
    for t in &tensors {
        let group = params.get(&t.name).map_or("other", |e| e.group.as_str());
        let worst = groups.entry(group.to_owned()).or_insert(0.0f64);
        *worst = worst.max(t.max_rel_err);
    }
    Ok(GradcheckReport {
        loss,
        step: cfg.step,
        tolerance: cfg.tolerance,
        max_rel_err,
        forward_gap,
        passed: max_rel_err < cfg.tolerance && forward_gap < cfg.tolerance,
        groups,
        tensors,
    })
}
