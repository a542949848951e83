//! Temporal signal utilities: median low-pass filtering, decision-change
//! counting and selection of high-flicker frame windows.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, Tensor};

/// Half-open frame window `[start, end)` and the decision changes inside it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Region {
    pub start: usize,
    pub end: usize,
    pub change_count: usize,
}

impl Region {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.start < other.end && other.start < self.end
    }
}

/// Low-pass filters applicable to a `T×k` logit series.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum LowPassFilter {
    Median { window: usize },
}

impl LowPassFilter {
    pub fn apply(&self, y: &Tensor) -> Result<Tensor> {
        match *self {
            LowPassFilter::Median { window } => median_filter(y, window),
        }
    }
}

/// Symmetric reflection of `i` (possibly negative or past the end) into
/// `[0, len)`, repeating the edge sample: `… b a | a b c | c b …`.
#[inline]
fn reflect(i: isize, len: usize) -> usize {
    let len = len as isize;
    let period = 2 * len;
    let m = i.rem_euclid(period);
    (if m < len { m } else { period - 1 - m }) as usize
}

/// Per-column centered median over an odd window with symmetric edge
/// reflection. Output has the input's `T×k` shape.
pub fn median_filter(y: &Tensor, window: usize) -> Result<Tensor> {
    if y.rank() != 2 {
        return Err(Error::ShapeMismatch(format!("median_filter expects T×k, got {:?}", y.shape())));
    }
    if window % 2 == 0 {
        return Err(Error::EvenWindow(window));
    }
    let (t, k) = (y.dim(0), y.dim(1));
    if window > 2 * t - 1 {
        return Err(Error::WindowTooLarge { window, len: t });
    }
    let half = (window / 2) as isize;
    let src = y.data();
    let mut out = vec![0.0f32; t * k];
    let mut buf = Vec::with_capacity(window);
    for col in 0..k {
        for row in 0..t {
            buf.clear();
            buf.extend((-half..=half).map(|o| src[reflect(row as isize + o, t) * k + col]));
            let mid = buf.len() / 2;
            let (_, m, _) = buf.select_nth_unstable_by(mid, f32::total_cmp);
            out[row * k + col] = *m;
        }
    }
    Tensor::new([t, k], out)
}

pub fn decisions(y: &Tensor) -> Vec<usize> {
    y.rows().map(argmax).collect()
}

/// Number of consecutive pairs whose decisions differ.
pub fn count_changes(preds: &[usize]) -> usize {
    preds.windows(2).filter(|w| w[0] != w[1]).count()
}

/// Changes per consecutive frame pair; `0.0` for a single frame.
pub fn normalized_change_rate(preds: &[usize]) -> f64 {
    if preds.len() < 2 {
        0.0
    } else {
        count_changes(preds) as f64 / (preds.len() - 1) as f64
    }
}

/// Argmax changes across a `T×k` logit series (ties go to the lowest class).
pub fn count_decision_changes(y: &Tensor) -> usize {
    count_changes(&decisions(y))
}

pub fn normalized_changes(y: &Tensor) -> f64 {
    normalized_change_rate(&decisions(y))
}

/// Score every stride-1 window of width `window` by the decision changes
/// strictly inside it (transitions between two frames both in the window).
fn score_windows(preds: &[usize], window: usize) -> Vec<Region> {
    let t = preds.len();
    let flips: Vec<usize> = (0..t).map(|i| usize::from(i > 0 && preds[i] != preds[i - 1])).collect();
    let mut prefix = vec![0usize; t + 1];
    for i in 0..t {
        prefix[i + 1] = prefix[i] + flips[i];
    }
    (0..=t - window)
        .map(|s| Region { start: s, end: s + window, change_count: prefix[s + window] - prefix[s + 1] })
        .collect()
}

/// Greedy choice of up to `num_regions` disjoint windows with the most
/// decision changes; ties go to the earlier window. A series no longer than
/// `window` yields the single region `[0, T)`.
pub fn select_regions(y: &Tensor, window: usize, num_regions: usize) -> Result<Vec<Region>> {
    let preds = decisions(y);
    select_regions_from(&preds, window, num_regions)
}

pub fn select_regions_from(preds: &[usize], window: usize, num_regions: usize) -> Result<Vec<Region>> {
    check_region_args(preds, window, num_regions)?;
    let t = preds.len();
    if t <= window {
        return Ok(vec![Region { start: 0, end: t, change_count: count_changes(preds) }]);
    }
    let mut candidates = score_windows(preds, window);
    candidates.sort_by(|a, b| b.change_count.cmp(&a.change_count).then(a.start.cmp(&b.start)));
    let mut picked: Vec<Region> = Vec::with_capacity(num_regions);
    for c in candidates {
        if picked.len() == num_regions {
            break;
        }
        if picked.iter().all(|p| !p.overlaps(&c)) {
            picked.push(c);
        }
    }
    Ok(picked)
}

/// Like [`select_regions`], but draws windows at random with probability
/// proportional to `change_count + 1`, rejecting overlaps.
pub fn sample_regions<R: Rng>(preds: &[usize], window: usize, num_regions: usize, rng: &mut R) -> Result<Vec<Region>> {
    check_region_args(preds, window, num_regions)?;
    let t = preds.len();
    if t <= window {
        return Ok(vec![Region { start: 0, end: t, change_count: count_changes(preds) }]);
    }
    let mut pool = score_windows(preds, window);
    let mut picked = Vec::with_capacity(num_regions);
    while picked.len() < num_regions && !pool.is_empty() {
        let total: usize = pool.iter().map(|r| r.change_count + 1).sum();
        let mut ticket = rng.random_range(0..total);
        let pos = pool
            .iter()
            .position(|r| {
                let w = r.change_count + 1;
                if ticket < w {
                    true
                } else {
                    ticket -= w;
                    false
                }
            })
            .expect("ticket below total weight");
        let chosen = pool[pos];
        picked.push(chosen);
        pool.retain(|r| !r.overlaps(&chosen));
    }
    picked.sort_by_key(|r| r.start);
    Ok(picked)
}

fn check_region_args(preds: &[usize], window: usize, num_regions: usize) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidRange("empty series".into()));
    }
    if window < 2 {
        return Err(Error::InvalidRange(format!("region window must be >= 2, got {window}")));
    }
    if num_regions < 1 {
        return Err(Error::InvalidRange("num_regions must be >= 1".into()));
    }
    Ok(())
}
