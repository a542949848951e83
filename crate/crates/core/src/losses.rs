//! Training and adaptation objectives.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-class sample counts `n_j` and the LDAM margin temperature `C`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    counts: Vec<usize>,
    c: f32,
}

impl ClassCounts {
    pub fn new(counts: Vec<usize>, c: f32) -> Result<Self> {
        if counts.len() < 2 {
            return Err(Error::InvalidCounts(format!("need at least 2 classes, got {}", counts.len())));
        }
        if let Some(j) = counts.iter().position(|&n| n == 0) {
            return Err(Error::EmptyClass(j));
        }
        if !(c.is_finite() && c >= 0.0) {
            return Err(Error::InvalidCounts(format!("margin temperature must be finite and >= 0, got {c}")));
        }
        Ok(ClassCounts { counts, c })
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn temperature(&self) -> f32 {
        self.c
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    /// `Δ_j = C / n_j^{1/4}`: rarer classes get larger margins.
    pub fn margins(&self) -> Vec<f32> {
        self.counts.iter().map(|&n| (self.c as f64 / (n as f64).powf(0.25)) as f32).collect()
    }
}

/// Per-frame logits of one video.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitSeries {
    y: Tensor,
    frame_ids: Vec<usize>,
}

impl LogitSeries {
    pub fn new(y: Tensor, frame_ids: Vec<usize>) -> Result<Self> {
        if y.rank() != 2 || y.dim(0) != frame_ids.len() {
            return Err(Error::ShapeMismatch(format!(
                "logit series {:?} with {} frame ids",
                y.shape(),
                frame_ids.len()
            )));
        }
        if frame_ids.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidRange("frame ids must be strictly increasing".into()));
        }
        Ok(LogitSeries { y, frame_ids })
    }

    /// Frames numbered `0..T`.
    pub fn contiguous(y: Tensor) -> Result<Self> {
        let t = if y.rank() == 2 { y.dim(0) } else { 0 };
        Self::new(y, (0..t).collect())
    }

    pub fn logits(&self) -> &Tensor {
        &self.y
    }

    pub fn frame_ids(&self) -> &[usize] {
        &self.frame_ids
    }

    pub fn len(&self) -> usize {
        self.frame_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_ids.is_empty()
    }
}

/// Frames entering the temporal-consistency loss.
#[derive(Clone, Debug, PartialEq)]
pub enum RegionSet {
    All,
    Ranges(Vec<Range<usize>>),
}

impl RegionSet {
    /// Sorted, de-duplicated frame indices covered for a series of `len` frames.
    pub fn frames(&self, len: usize) -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = match self {
            RegionSet::All => (0..len).collect(),
            RegionSet::Ranges(ranges) => {
                let mut v = Vec::new();
                for r in ranges {
                    if r.start >= r.end || r.end > len {
                        return Err(Error::InvalidRange(format!("region {r:?} outside [0, {len})")));
                    }
                    v.extend(r.clone());
                }
                v
            }
        };
        idx.sort_unstable();
        idx.dedup();
        if idx.is_empty() {
            return Err(Error::EmptyRegionSet);
        }
        Ok(idx)
    }
}

/// LDAM: softmax cross-entropy after subtracting `Δ_y` from the true-class
/// logit, averaged over the batch.
pub fn ldam_loss(tape: &mut Tape, logits: Var, labels: &[usize], counts: &ClassCounts) -> Result<Var> {
    let k = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    if counts.counts().len() != k {
        return Err(Error::ShapeMismatch(format!("{} class counts for {k} logits", counts.counts().len())));
    }
    tape.softmax_cross_entropy(logits, labels, &counts.margins())
}

pub fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    let k = tape.value(logits).shape().get(1).copied().unwrap_or(0);
    tape.softmax_cross_entropy(logits, labels, &vec![0.0; k])
}

/// Mean over the selected frames of `‖y_t − target_t‖²`. The target is a
/// constant; no gradient reaches it.
pub fn temporal_consistency_loss(tape: &mut Tape, y: Var, target: &Tensor, regions: &RegionSet) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    if shape.len() != 2 || target.shape() != shape.as_slice() {
        return Err(Error::ShapeMismatch(format!("logits {shape:?} vs target {:?}", target.shape())));
    }
    match regions {
        RegionSet::All => tape.squared_error(y, target),
        RegionSet::Ranges(_) => {
            let frames = regions.frames(shape[0])?;
            if frames.len() == shape[0] {
                return tape.squared_error(y, target);
            }
            // Row selection as a constant 0/1 matrix keeps the op differentiable.
            let mut sel = vec![0.0f32; frames.len() * shape[0]];
            for (r, &f) in frames.iter().enumerate() {
                sel[r * shape[0] + f] = 1.0;
            }
            let sel = tape.leaf(Tensor::new([frames.len(), shape[0]], sel)?, false);
            let picked = tape.matmul(sel, y)?;
            tape.squared_error(picked, &target.select(&frames)?)
        }
    }
}

/// Mean softmax entropy over frames (the TENT objective).
pub fn entropy_loss(tape: &mut Tape, logits: Var) -> Result<Var> {
    tape.softmax_entropy(logits)
}

/// Mean squared difference between consecutive frames' logits, the direct
/// inter-frame objective. Outlier jumps dominate it, so adaptation uses
/// [`temporal_consistency_loss`]; this is kept for experiments only.
pub fn inter_frame_difference_loss(tape: &mut Tape, y: Var) -> Result<Var> {
    let t = tape.value(y).dim(0);
    if t < 2 {
        return Err(Error::InvalidRange("need at least two frames".into()));
    }
    let mut diff = vec![0.0f32; (t - 1) * t];
    for r in 0..t - 1 {
        diff[r * t + r] = -1.0;
        diff[r * t + r + 1] = 1.0;
    }
    let d = tape.leaf(Tensor::new([t - 1, t], diff)?, false);
    let delta = tape.matmul(d, y)?;
    let zeros = Tensor::zeros(tape.value(delta).shape().to_vec());
    tape.squared_error(delta, &zeros)
}

/// Finite-difference Jacobian estimate from two consecutive frames.
#[derive(Clone, Debug, PartialEq)]
pub struct JacobianEstimate {
    pub outputs: usize,
    pub inputs: usize,
    /// Row-major `outputs × inputs`; `None` where the input did not move.
    pub entries: Vec<Option<f64>>,
}

/// Input differences smaller than this leave the column undefined.
pub const JACOBIAN_MIN_STEP: f64 = 1e-8;

impl JacobianEstimate {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.entries[i * self.inputs + j]
    }

    pub fn column(&self, j: usize) -> Vec<Option<f64>> {
        (0..self.outputs).map(|i| self.get(i, j)).collect()
    }

    /// Squared Frobenius norm over the defined entries.
    pub fn frobenius_sq(&self) -> f64 {
        self.entries.iter().flatten().map(|v| v * v).sum()
    }
}

/// `J_ij ≈ (f_i(x_t) − f_i(x_{t−1})) / (x_{t,j} − x_{t−1,j})`, masking
/// entries whose denominator is below [`JACOBIAN_MIN_STEP`].
pub fn jacobian_fd_approx(f_prev: &[f64], f_cur: &[f64], x_prev: &[f64], x_cur: &[f64]) -> Result<JacobianEstimate> {
    if f_prev.len() != f_cur.len() || x_prev.len() != x_cur.len() {
        return Err(Error::ShapeMismatch("jacobian inputs differ in length".into()));
    }
    let (k, d) = (f_cur.len(), x_cur.len());
    let mut entries = Vec::with_capacity(k * d);
    for i in 0..k {
        let df = f_cur[i] - f_prev[i];
        for j in 0..d {
            let dx = x_cur[j] - x_prev[j];
            entries.push((dx.abs() >= JACOBIAN_MIN_STEP).then(|| df / dx));
        }
    }
    Ok(JacobianEstimate { outputs: k, inputs: d, entries })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn logits(rows: &[&[f32]]) -> Tensor {
        let k = rows[0].len();
        Tensor::new([rows.len(), k], rows.concat()).unwrap()
    }

    fn scalar(tape: &Tape, v: Var) -> f32 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn margin_of_sixteen_samples_is_exact() {
        let c = ClassCounts::new(vec![16, 1], 2.0).unwrap();
        assert_eq!(c.margins(), vec![1.0, 2.0]);
    }

    #[test]
    fn counts_validation() {
        assert!(matches!(ClassCounts::new(vec![3, 0, 2], 1.0), Err(Error::EmptyClass(1))));
        assert!(ClassCounts::new(vec![3, 2], -1.0).is_err());
    }

    #[test]
    fn uniform_logits_cross_entropy_is_ln_k() {
        let mut tape = Tape::new();
        let z = tape.leaf(Tensor::zeros([3, 8]), false);
        let l = cross_entropy(&mut tape, z, &[0, 3, 7]).unwrap();
        assert!((scalar(&tape, l) - 8f32.ln()).abs() < 1e-6);
    }

    #[test]
    fn dominant_logit_cross_entropy_vanishes() {
        let mut tape = Tape::new();
        let z = tape.leaf(logits(&[&[60.0, 0.0, 0.0]]), false);
        let l = cross_entropy(&mut tape, z, &[0]).unwrap();
        assert!(scalar(&tape, l) < 1e-12);
    }

    #[test]
    fn ldam_with_zero_temperature_is_cross_entropy() {
        let z = logits(&[&[0.3, -1.2, 2.0], &[1.0, 1.0, -0.5]]);
        let mut tape = Tape::new();
        let v = tape.leaf(z, false);
        let a = ldam_loss(&mut tape, v, &[2, 0], &ClassCounts::new(vec![5, 50, 500], 0.0).unwrap()).unwrap();
        let b = cross_entropy(&mut tape, v, &[2, 0]).unwrap();
        assert_eq!(scalar(&tape, a), scalar(&tape, b));
    }

    #[test]
    fn label_out_of_range() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros([1, 3]), false);
        assert!(matches!(cross_entropy(&mut tape, v, &[3]), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    }

    #[test]
    fn entropy_limits() {
        let mut tape = Tape::new();
        let u = tape.leaf(Tensor::zeros([2, 8]), false);
        let h = entropy_loss(&mut tape, u).unwrap();
        assert!((scalar(&tape, h) - 8f32.ln()).abs() < 1e-6);
        let sharp = tape.leaf(logits(&[&[80.0, 0.0, 0.0, 0.0]]), false);
        let h = entropy_loss(&mut tape, sharp).unwrap();
        assert!(scalar(&tape, h) < 1e-20);
    }

    #[test]
    fn temporal_loss_examples() {
        let y = logits(&[&[1.0, 0.0, 0.0]]);
        let target = Tensor::zeros([1, 3]);
        let mut tape = Tape::new();
        let v = tape.leaf(y.clone(), true);
        let l = temporal_consistency_loss(&mut tape, v, &target, &RegionSet::All).unwrap();
        assert_eq!(scalar(&tape, l), 1.0);

        let mut tape = Tape::new();
        let v = tape.leaf(y.clone(), true);
        let l = temporal_consistency_loss(&mut tape, v, &y, &RegionSet::All).unwrap();
        assert_eq!(scalar(&tape, l), 0.0);
        let g = tape.backward(l).unwrap();
        assert!(g.of(v).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn disjoint_cover_equals_all_frames() {
        let y = logits(&[&[1.0, 2.0], &[0.5, -1.0], &[3.0, 0.0], &[-2.0, 1.0], &[0.0, 0.25]]);
        let target = logits(&[&[0.0, 2.0], &[0.5, 1.0], &[1.0, 0.0], &[-1.0, 1.0], &[0.0, 0.0]]);
        let mut tape = Tape::new();
        let v = tape.leaf(y, false);
        let all = temporal_consistency_loss(&mut tape, v, &target, &RegionSet::All).unwrap();
        let cover = RegionSet::Ranges(vec![3..5, 0..2, 2..3]);
        let parts = temporal_consistency_loss(&mut tape, v, &target, &cover).unwrap();
        assert_eq!(scalar(&tape, all), scalar(&tape, parts));

        let sub = RegionSet::Ranges(vec![0..1]);
        let l = temporal_consistency_loss(&mut tape, v, &target, &sub).unwrap();
        assert_eq!(scalar(&tape, l), 1.0);
    }

    #[test]
    fn region_validation() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros([4, 2]), false);
        let target = Tensor::zeros([4, 2]);
        let empty = RegionSet::Ranges(vec![]);
        assert!(matches!(temporal_consistency_loss(&mut tape, v, &target, &empty), Err(Error::EmptyRegionSet)));
        let wrong = Tensor::zeros([3, 2]);
        assert!(matches!(
            temporal_consistency_loss(&mut tape, v, &wrong, &RegionSet::All),
            Err(Error::ShapeMismatch(_))
        ));
        assert!(RegionSet::Ranges(vec![2..6]).frames(4).is_err());
    }

    #[test]
    fn jacobian_of_constant_map_is_zero() {
        let j = jacobian_fd_approx(&[1.0, 2.0], &[1.0, 2.0], &[0.0, 0.0, 0.0], &[0.1, -0.2, 0.3]).unwrap();
        assert!(j.entries.iter().all(|e| *e == Some(0.0)));
    }

    #[test]
    fn jacobian_masks_unmoved_inputs() {
        let j = jacobian_fd_approx(&[0.0], &[1.0], &[0.0, 5.0], &[0.5, 5.0]).unwrap();
        assert_eq!(j.get(0, 0), Some(2.0));
        assert_eq!(j.get(0, 1), None);
        assert_eq!(j.frobenius_sq(), 4.0);
    }

    #[test]
    fn series_validation() {
        assert!(LogitSeries::new(Tensor::zeros([2, 3]), vec![4, 4]).is_err());
        assert!(LogitSeries::new(Tensor::zeros([2, 3]), vec![0]).is_err());
        let s = LogitSeries::contiguous(Tensor::zeros([3, 2])).unwrap();
        assert_eq!(s.frame_ids(), &[0, 1, 2]);
    }
}
