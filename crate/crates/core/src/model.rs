//! Toy residual CNN with batch-norm layers and a cosine classification head.
//!
//! Each stage starts with a stride-2 block whose skip path is a 1×1
//! projection convolution. A block is conv-bn-relu, conv-bn, skip add, relu.
//! After global average pooling a hidden fully-connected layer with relu
//! feeds the output layer, which takes the cosine between the L2-normalized
//! feature vector and each L2-normalized weight row and multiplies by a fixed
//! scale `s`, so every logit lies in `[-s, s]`.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BnMode, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;
/// Added to the feature norm in the head's input normalization.
pub const HEAD_INPUT_EPS: f32 = 1e-8;

const SCALE_NAME: &str = "head.scale";
const INPUT_HW_NAME: &str = "meta.input_hw";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    pub blocks: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    pub input_hw: usize,
    pub in_channels: usize,
    pub stages: Vec<StageSpec>,
    pub num_classes: usize,
    pub head_hidden: usize,
    pub head_scale: f32,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            input_hw: 32,
            in_channels: 3,
            stages: vec![
                StageSpec { channels: 16, blocks: 1 },
                StageSpec { channels: 32, blocks: 1 },
                StageSpec { channels: 64, blocks: 1 },
            ],
            num_classes: 8,
            head_hidden: 64,
            head_scale: 16.0,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.num_classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.num_classes));
        }
        if self.in_channels < 1 || self.head_hidden < 1 {
            return bad("in_channels and head_hidden must be >= 1".into());
        }
        if self.stages.iter().any(|s| s.channels < 1 || s.blocks < 1) {
            return bad("every stage needs channels >= 1 and blocks >= 1".into());
        }
        let div = 1usize << self.stages.len();
        if self.input_hw == 0 || self.input_hw % div != 0 {
            return bad(format!("input_hw {} not divisible by 2^{}", self.input_hw, self.stages.len()));
        }
        if !(self.head_scale.is_finite() && self.head_scale > 0.0) {
            return bad(format!("head_scale must be positive, got {}", self.head_scale));
        }
        Ok(())
    }

    /// Number of batch-norm layers (two per residual block).
    pub fn bn_layers(&self) -> usize {
        2 * self.stages.iter().map(|s| s.blocks).sum::<usize>()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    BnAffine,
    BnStats,
    Other,
}

impl ParamGroup {
    fn tag(self) -> u8 {
        match self {
            ParamGroup::BnAffine => 0,
            ParamGroup::BnStats => 1,
            ParamGroup::Other => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(ParamGroup::BnAffine),
            1 => Some(ParamGroup::BnStats),
            2 => Some(ParamGroup::Other),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::BnAffine => "bn_affine",
            ParamGroup::BnStats => "bn_stats",
            ParamGroup::Other => "other",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub tensor: Tensor,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Named parameter store. Names are unique and ordered; the architecture is
/// recovered from them, so a loaded weight file needs no side-channel spec.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    entries: BTreeMap<String, ParamEntry>,
    spec: ModelSpec,
}

/// Which leaves of a forward pass should receive gradients.
#[derive(Clone, Copy, Debug)]
pub enum GradScope<'a> {
    None,
    Trainable,
    Only(&'a [String]),
}

impl GradScope<'_> {
    fn wants(&self, name: &str, entry: &ParamEntry) -> bool {
        match self {
            GradScope::None => false,
            GradScope::Trainable => entry.trainable,
            GradScope::Only(names) => entry.trainable && names.iter().any(|n| n == name),
        }
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    /// Updated running statistics (train mode only), keyed by parameter name.
    pub stat_updates: Vec<(String, Tensor)>,
}

fn block_prefix(stage: usize, block: usize) -> String {
    format!("stage{stage}.block{block}")
}

fn he_uniform(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor {
    let bound = (6.0 / fan_in as f32).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Fresh parameters: He-uniform conv/linear weights, zero biases, unit
/// gammas, zero betas, zero running means and unit running variances.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ModelParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut entries = BTreeMap::new();
    let mut put = |name: String, tensor: Tensor, group: ParamGroup| {
        let trainable = group != ParamGroup::BnStats;
        entries.insert(name, ParamEntry { tensor, group, trainable });
    };

    let mut in_ch = spec.in_channels;
    for (si, stage) in spec.stages.iter().enumerate() {
        let c = stage.channels;
        for bi in 0..stage.blocks {
            let p = block_prefix(si, bi);
            let cin = if bi == 0 { in_ch } else { c };
            put(format!("{p}.conv1.weight"), he_uniform(&mut rng, &[c, cin, 3, 3], cin * 9), ParamGroup::Other);
            put(format!("{p}.conv2.weight"), he_uniform(&mut rng, &[c, c, 3, 3], c * 9), ParamGroup::Other);
            if bi == 0 {
                put(format!("{p}.proj.weight"), he_uniform(&mut rng, &[c, cin, 1, 1], cin), ParamGroup::Other);
            }
            for bn in ["bn1", "bn2"] {
                put(format!("{p}.{bn}.gamma"), Tensor::full([c], 1.0), ParamGroup::BnAffine);
                put(format!("{p}.{bn}.beta"), Tensor::zeros([c]), ParamGroup::BnAffine);
                put(format!("{p}.{bn}.running_mean"), Tensor::zeros([c]), ParamGroup::BnStats);
                put(format!("{p}.{bn}.running_var"), Tensor::full([c], 1.0), ParamGroup::BnStats);
            }
        }
        in_ch = c;
    }
    let h = spec.head_hidden;
    put("head.fc.weight".into(), he_uniform(&mut rng, &[in_ch, h], in_ch), ParamGroup::Other);
    put("head.fc.bias".into(), Tensor::zeros([h]), ParamGroup::Other);
    put("head.out.weight".into(), he_uniform(&mut rng, &[spec.num_classes, h], h), ParamGroup::Other);
    put(SCALE_NAME.into(), Tensor::scalar(spec.head_scale), ParamGroup::Other);
    put(INPUT_HW_NAME.into(), Tensor::scalar(spec.input_hw as f32), ParamGroup::Other);
    for name in [SCALE_NAME, INPUT_HW_NAME] {
        entries.get_mut(name).expect("just inserted").trainable = false;
    }
    Ok(ModelParams { entries, spec: spec.clone() })
}

impl ModelParams {
    /// Assemble from raw entries, recovering and validating the architecture.
    pub fn from_entries(entries: BTreeMap<String, ParamEntry>) -> Result<Self> {
        let spec = infer_spec(&entries)?;
        for (name, e) in &entries {
            let expected = if name.contains(".bn") {
                if name.ends_with(".gamma") || name.ends_with(".beta") {
                    ParamGroup::BnAffine
                } else {
                    ParamGroup::BnStats
                }
            } else {
                ParamGroup::Other
            };
            if e.group != expected {
                return Err(Error::InvalidSpec(format!("{name} tagged {:?}, expected {expected:?}", e.group)));
            }
            if e.group == ParamGroup::BnStats && e.trainable {
                return Err(Error::InvalidSpec(format!("running statistic {name} marked trainable")));
            }
        }
        Ok(ModelParams { entries, spec })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn entries(&self) -> &BTreeMap<String, ParamEntry> {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.tensor)
            .ok_or_else(|| Error::ArchMismatch(format!("missing parameter {name}")))
    }

    /// Replace a tensor, keeping its shape, group and trainable flag.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let e = self
            .entries
            .get_mut(name)
            .ok_or_else(|| Error::ArchMismatch(format!("missing parameter {name}")))?;
        if e.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: {:?} replaced by {:?}",
                e.tensor.shape(),
                tensor.shape()
            )));
        }
        e.tensor = tensor;
        Ok(())
    }

    pub fn names_in_group(&self, group: ParamGroup) -> Vec<String> {
        self.entries.iter().filter(|(_, e)| e.group == group).map(|(n, _)| n.clone()).collect()
    }

    /// Total scalar count over all entries, statistics and metadata included.
    pub fn num_scalars(&self) -> usize {
        self.entries.values().map(|e| e.tensor.len()).sum()
    }

    pub fn num_trainable_scalars(&self) -> usize {
        self.entries.values().filter(|e| e.trainable).map(|e| e.tensor.len()).sum()
    }

    fn leaf(&self, tape: &mut Tape, name: &str, scope: GradScope<'_>) -> Result<Var> {
        let e = self.entries.get(name).ok_or_else(|| Error::ArchMismatch(format!("missing parameter {name}")))?;
        Ok(tape.param(name, e.tensor.clone(), scope.wants(name, e)))
    }

    /// Record a forward pass of `batch` (`N×C×H×W`) on `tape`.
    pub fn forward(&self, tape: &mut Tape, batch: &Tensor, mode: BnMode, scope: GradScope<'_>) -> Result<ForwardOutput> {
        let spec = &self.spec;
        let hw = spec.input_hw;
        if batch.rank() != 4 || batch.dim(1) != spec.in_channels || batch.dim(2) != hw || batch.dim(3) != hw {
            return Err(Error::ShapeMismatch(format!(
                "model expects N×{}×{hw}×{hw}, got {:?}",
                spec.in_channels,
                batch.shape()
            )));
        }
        let act = |r: Result<Var>, what: &str| -> Result<Var> {
            r.map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteActivation(what.to_owned()),
                other => other,
            })
        };

        let mut stat_updates = Vec::new();
        let mut x = tape.leaf(batch.clone(), false);
        for (si, stage) in spec.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let p = block_prefix(si, bi);
                let stride = if bi == 0 { 2 } else { 1 };
                let w1 = self.leaf(tape, &format!("{p}.conv1.weight"), scope)?;
                let h = act(tape.conv2d(x, w1, stride, 1), &p)?;
                let h = self.bn(tape, h, &format!("{p}.bn1"), mode, scope, &mut stat_updates)?;
                let h = act(tape.relu(h), &p)?;
                let w2 = self.leaf(tape, &format!("{p}.conv2.weight"), scope)?;
                let h = act(tape.conv2d(h, w2, 1, 1), &p)?;
                let h = self.bn(tape, h, &format!("{p}.bn2"), mode, scope, &mut stat_updates)?;
                let skip = if bi == 0 {
                    let wp = self.leaf(tape, &format!("{p}.proj.weight"), scope)?;
                    act(tape.conv2d(x, wp, 2, 0), &p)?
                } else {
                    x
                };
                let sum = act(tape.add(h, skip), &p)?;
                x = act(tape.relu(sum), &p)?;
            }
        }
        let pooled = act(tape.global_avg_pool(x), "pool")?;
        let fc_w = self.leaf(tape, "head.fc.weight", scope)?;
        let fc_b = self.leaf(tape, "head.fc.bias", scope)?;
        let hidden = act(tape.matmul(pooled, fc_w), "head.fc")?;
        let hidden = act(tape.add(hidden, fc_b), "head.fc")?;
        let hidden = act(tape.relu(hidden), "head.fc")?;
        let feat = act(tape.normalize_rows(hidden, HEAD_INPUT_EPS), "head.norm")?;

        let out_w = self.tensor("head.out.weight")?;
        if let Some(row) = out_w.rows().position(|r| r.iter().all(|&v| v == 0.0)) {
            return Err(Error::NormalizationDegenerate(format!("head.out.weight row {row} has zero norm")));
        }
        let out_w = self.leaf(tape, "head.out.weight", scope)?;
        let w_hat = act(tape.normalize_rows(out_w, 0.0), "head.out")?;
        let w_t = tape.transpose(w_hat)?;
        let cos = act(tape.matmul(feat, w_t), "head.out")?;
        let logits = act(tape.scale(cos, spec.head_scale), "head.out")?;
        Ok(ForwardOutput { logits, stat_updates })
    }

    fn bn(
        &self,
        tape: &mut Tape,
        x: Var,
        prefix: &str,
        mode: BnMode,
        scope: GradScope<'_>,
        updates: &mut Vec<(String, Tensor)>,
    ) -> Result<Var> {
        let gamma = self.leaf(tape, &format!("{prefix}.gamma"), scope)?;
        let beta = self.leaf(tape, &format!("{prefix}.beta"), scope)?;
        let rm_name = format!("{prefix}.running_mean");
        let rv_name = format!("{prefix}.running_var");
        let (out, stats) = tape
            .batch_norm2d(x, gamma, beta, self.tensor(&rm_name)?, self.tensor(&rv_name)?, BN_EPS, mode, BN_MOMENTUM)
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteActivation(prefix.to_owned()),
                other => other,
            })?;
        if let Some(s) = stats {
            updates.push((rm_name, s.mean));
            updates.push((rv_name, s.var));
        }
        Ok(out)
    }

    /// Eval-mode logits for every frame, computed in chunks without gradients.
    pub fn predict(&self, frames: &Tensor, chunk: usize) -> Result<Tensor> {
        let n = frames.dim(0);
        let chunk = chunk.max(1);
        let mut parts = Vec::new();
        for start in (0..n).step_by(chunk) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            let batch = frames.select(&idx)?;
            let mut tape = Tape::new();
            let out = self.forward(&mut tape, &batch, BnMode::Eval, GradScope::None)?;
            parts.push(tape.value(out.logits).clone());
        }
        Tensor::concat(&parts)
    }

    pub fn write_weights<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(WEIGHTS_MAGIC)?;
        w.write_all(&[WEIGHTS_VERSION])?;
        w.write_all(&(self.entries.len() as u32).to_le_bytes())?;
        for (name, e) in &self.entries {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&[e.group.tag(), e.trainable as u8])?;
            write_tensor(w, &e.tensor)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_weights(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_weights<R: Read>(r: &mut R) -> Result<Self> {
        let corrupt = |e: Error| match e {
            Error::CorruptTensor(m) => Error::CorruptWeights(m),
            Error::Io(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => Error::CorruptWeights("truncated".into()),
            other => other,
        };
        let mut head = [0u8; 9];
        r.read_exact(&mut head).map_err(|e| corrupt(e.into()))?;
        if &head[..4] != WEIGHTS_MAGIC {
            return Err(Error::CorruptWeights("bad magic".into()));
        }
        if head[4] != WEIGHTS_VERSION {
            return Err(Error::VersionMismatch(format!("weights version {}", head[4])));
        }
        let count = u32::from_le_bytes([head[5], head[6], head[7], head[8]]) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(|e| corrupt(e.into()))?;
            let len = u32::from_le_bytes(len) as usize;
            if len > 4096 {
                return Err(Error::CorruptWeights(format!("name length {len}")));
            }
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(|e| corrupt(e.into()))?;
            let name = String::from_utf8(name).map_err(|_| Error::CorruptWeights("name is not UTF-8".into()))?;
            let mut flags = [0u8; 2];
            r.read_exact(&mut flags).map_err(|e| corrupt(e.into()))?;
            let group = ParamGroup::from_tag(flags[0])
                .ok_or_else(|| Error::VersionMismatch(format!("unknown group tag {} on {name}", flags[0])))?;
            let trainable = match flags[1] {
                0 => false,
                1 => true,
                v => return Err(Error::CorruptWeights(format!("trainable flag {v} on {name}"))),
            };
            let tensor = read_tensor(r).map_err(corrupt)?;
            if entries.insert(name.clone(), ParamEntry { tensor, group, trainable }).is_some() {
                return Err(Error::CorruptWeights(format!("duplicate parameter {name}")));
            }
        }
        Self::from_entries(entries).map_err(|e| match e {
            Error::InvalidSpec(m) => Error::CorruptWeights(m),
            other => other,
        })
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let params = Self::read_weights(&mut r)?;
        if !r.is_empty() {
            return Err(Error::CorruptWeights(format!("{} trailing bytes", r.len())));
        }
        Ok(params)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TWGT";
pub const WEIGHTS_VERSION: u8 = 1;

fn infer_spec(entries: &BTreeMap<String, ParamEntry>) -> Result<ModelSpec> {
    let bad = |m: String| Error::InvalidSpec(m);
    let get = |name: &str| entries.get(name).map(|e| &e.tensor).ok_or_else(|| bad(format!("missing {name}")));
    let scalar = |name: &str| -> Result<f32> { get(name)?.item().ok_or_else(|| bad(format!("{name} not scalar"))) };

    let mut stages = Vec::new();
    let mut in_channels = None;
    while entries.contains_key(&format!("{}.conv1.weight", block_prefix(stages.len(), 0))) {
        let si = stages.len();
        let mut blocks = 0;
        let mut channels = 0;
        while let Some(e) = entries.get(&format!("{}.conv1.weight", block_prefix(si, blocks))) {
            if e.tensor.rank() != 4 {
                return Err(bad(format!("conv weight of stage {si} has rank {}", e.tensor.rank())));
            }
            channels = e.tensor.dim(0);
            if si == 0 && blocks == 0 {
                in_channels = Some(e.tensor.dim(1));
            }
            blocks += 1;
        }
        stages.push(StageSpec { channels, blocks });
    }
    let fc = get("head.fc.weight")?;
    let out = get("head.out.weight")?;
    if fc.rank() != 2 || out.rank() != 2 {
        return Err(bad("head weights must be rank 2".into()));
    }
    let spec = ModelSpec {
        input_hw: scalar(INPUT_HW_NAME)? as usize,
        // Without residual stages the head reads the pooled input directly.
        in_channels: in_channels.unwrap_or(fc.dim(0)),
        stages,
        num_classes: out.dim(0),
        head_hidden: fc.dim(1),
        head_scale: scalar(SCALE_NAME)?,
    };
    spec.validate()?;

    // Every expected entry must be present with the expected shape.
    let reference = build_model(&spec, 0)?;
    if reference.entries.len() != entries.len() {
        return Err(bad(format!("expected {} entries, found {}", reference.entries.len(), entries.len())));
    }
    for (name, e) in &reference.entries {
        let found = entries.get(name).ok_or_else(|| bad(format!("missing {name}")))?;
        if found.tensor.shape() != e.tensor.shape() {
            return Err(bad(format!("{name} has shape {:?}, expected {:?}", found.tensor.shape(), e.tensor.shape())));
        }
    }
    Ok(spec)
}
