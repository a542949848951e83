//! Synthetic video benchmark.
//!
//! Each class has a small colored texture template. A video is a sequence of
//! label segments; within a segment the class template drifts smoothly over a
//! gray background and every frame receives fresh pixel noise. One
//! photometric shift (brightness, contrast, per-channel gain) is drawn per
//! video and applied to all of its frames, so every video is its own domain.

use std::f32::consts::PI;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor, write_tensor, Tensor};

const BACKGROUND: f32 = 0.5;
const CHANNELS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Shift {
    pub brightness: f32,
    pub contrast: f32,
    pub channel_gain: [f32; 3],
}

impl Shift {
    pub fn identity() -> Self {
        Shift { brightness: 0.0, contrast: 1.0, channel_gain: [1.0; 3] }
    }

    /// `gain_c · (contrast · v + (1 − contrast) · 0.5 + brightness)`; exact
    /// identity for the identity shift.
    #[inline]
    pub fn apply(&self, v: f32, channel: usize) -> f32 {
        let offset = (1.0 - self.contrast) * BACKGROUND + self.brightness;
        self.channel_gain[channel] * (self.contrast * v + offset)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftRanges {
    pub brightness: [f32; 2],
    pub contrast: [f32; 2],
    pub channel_gain: [f32; 2],
}

impl Default for ShiftRanges {
    fn default() -> Self {
        ShiftRanges { brightness: [0.0, 0.0], contrast: [1.0, 1.0], channel_gain: [1.0, 1.0] }
    }
}

impl ShiftRanges {
    pub fn validate(&self) -> Result<()> {
        for (what, [lo, hi]) in [("brightness", self.brightness), ("contrast", self.contrast), ("channel_gain", self.channel_gain)] {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::InvalidRange(format!("{what} range [{lo}, {hi}]")));
            }
        }
        if self.contrast[0] <= 0.0 || self.channel_gain[0] <= 0.0 {
            return Err(Error::InvalidRange("contrast and channel gain must be positive".into()));
        }
        Ok(())
    }

    pub fn contains(&self, s: &Shift) -> bool {
        let inside = |v: f32, [lo, hi]: [f32; 2]| (lo..=hi).contains(&v);
        inside(s.brightness, self.brightness)
            && inside(s.contrast, self.contrast)
            && s.channel_gain.iter().all(|&g| inside(g, self.channel_gain))
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Shift {
        let mut draw = |[lo, hi]: [f32; 2]| if lo == hi { lo } else { rng.random_range(lo..=hi) };
        Shift {
            brightness: draw(self.brightness),
            contrast: draw(self.contrast),
            channel_gain: [draw(self.channel_gain), draw(self.channel_gain), draw(self.channel_gain)],
        }
    }
}

/// Generator settings shared by the training split and the test videos.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub patch: usize,
    pub template_seed: u64,
    pub noise_sigma: f32,
    /// Standard deviation of a per-frame brightness offset added on top of
    /// a video's fixed shift (illumination flicker); test videos only.
    pub frame_jitter: f32,
    /// Peak template displacement from the frame center, in pixels.
    pub drift_amplitude: f32,
    /// Frames per drift oscillation.
    pub drift_period: f32,
    /// Frames per class in the training split.
    pub train_counts: Vec<usize>,
    pub val_per_class: usize,
    pub train_shift: ShiftRanges,
    pub test_shift: ShiftRanges,
    pub frames: usize,
    pub min_segment: usize,
    pub max_segment: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            patch: 12,
            template_seed: 17,
            noise_sigma: 0.15,
            frame_jitter: 0.0,
            drift_amplitude: 6.0,
            drift_period: 48.0,
            train_counts: vec![240, 200, 160, 130, 110, 90, 75, 60],
            val_per_class: 50,
            train_shift: ShiftRanges { brightness: [-0.1, 0.1], contrast: [0.9, 1.1], channel_gain: [0.9, 1.1] },
            test_shift: ShiftRanges { brightness: [-0.35, 0.35], contrast: [0.45, 1.0], channel_gain: [0.6, 1.4] },
            frames: 400,
            min_segment: 25,
            max_segment: 75,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        self.train_shift.validate()?;
        self.test_shift.validate()?;
        if self.patch == 0 || !(self.noise_sigma >= 0.0) || !(self.frame_jitter >= 0.0) || !(self.drift_period > 0.0) || self.drift_amplitude < 0.0 {
            return Err(Error::InvalidRange("patch, noise_sigma or drift settings out of range".into()));
        }
        if self.min_segment == 0 || self.max_segment < self.min_segment {
            return Err(Error::InvalidRange(format!("segment lengths [{}, {}]", self.min_segment, self.max_segment)));
        }
        if self.frames < 2 * self.min_segment {
            return Err(Error::InvalidRange(format!(
                "{} frames cannot hold two segments of {}",
                self.frames, self.min_segment
            )));
        }
        Ok(())
    }
}

/// One `3×p×p` texture per class.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTemplates {
    patch: usize,
    templates: Vec<Tensor>,
}

impl ClassTemplates {
    /// Class `c` combines one of four textures (horizontal stripes, vertical
    /// stripes, checkerboard, ring) with one of several color palettes. The
    /// seed jitters the palettes.
    pub fn generate(classes: usize, patch: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base: [([f32; 3], [f32; 3]); 2] = [([0.95, 0.55, 0.15], [0.35, 0.2, 0.1]), ([0.15, 0.55, 0.95], [0.1, 0.2, 0.35])];
        let palettes = classes.div_ceil(4);
        let palette: Vec<([f32; 3], [f32; 3])> = (0..palettes)
            .map(|i| {
                let (mut on, mut off) = if i < base.len() {
                    base[i]
                } else {
                    (std::array::from_fn(|_| rng.random_range(0.1..0.95)), std::array::from_fn(|_| rng.random_range(0.05..0.4)))
                };
                for v in on.iter_mut().chain(off.iter_mut()) {
                    *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
                }
                (on, off)
            })
            .collect();
        let mid = (patch as f32 - 1.0) / 2.0;
        let templates = (0..classes)
            .map(|c| {
                let (on, off) = palette[c / 4];
                let mut data = vec![0.0f32; CHANNELS * patch * patch];
                for y in 0..patch {
                    for x in 0..patch {
                        let lit = match c % 4 {
                            0 => (y / 2) % 2 == 0,
                            1 => (x / 2) % 2 == 0,
                            2 => ((y / 3) + (x / 3)) % 2 == 0,
                            _ => {
                                let r = ((y as f32 - mid).powi(2) + (x as f32 - mid).powi(2)).sqrt();
                                r > mid * 0.45 && r < mid * 0.9
                            }
                        };
                        let color = if lit { on } else { off };
                        for ch in 0..CHANNELS {
                            data[(ch * patch + y) * patch + x] = color[ch];
                        }
                    }
                }
                Tensor::new([CHANNELS, patch, patch], data).expect("template shape")
            })
            .collect();
        ClassTemplates { patch, templates }
    }

    pub fn classes(&self) -> usize {
        self.templates.len()
    }

    pub fn patch(&self) -> usize {
        self.patch
    }

    pub fn get(&self, class: usize) -> &Tensor {
        &self.templates[class]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoMeta {
    pub labels: Vec<usize>,
    pub segments: Vec<Segment>,
    pub shift: Shift,
    pub noise_sigma: f32,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub frames: Tensor,
    pub meta: VideoMeta,
}

impl SyntheticVideo {
    pub fn labels(&self) -> &[usize] {
        &self.meta.labels
    }

    pub fn len(&self) -> usize {
        self.meta.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.labels.is_empty()
    }

    /// Write the frames as a TTEN file and the metadata as a JSON sidecar
    /// next to it (same stem, `.json` extension).
    pub fn save(&self, tensor_path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(tensor_path)?);
        write_tensor(&mut f, &self.frames)?;
        std::fs::write(sidecar_path(tensor_path), serde_json::to_vec_pretty(&self.meta)?)?;
        Ok(())
    }

    pub fn load(tensor_path: &Path) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(tensor_path)?);
        let frames = read_tensor(&mut f)?;
        let meta: VideoMeta = serde_json::from_slice(&std::fs::read(sidecar_path(tensor_path))?)?;
        if frames.rank() != 4 || frames.dim(0) != meta.labels.len() {
            return Err(Error::ShapeMismatch(format!(
                "video tensor {:?} with {} labels",
                frames.shape(),
                meta.labels.len()
            )));
        }
        Ok(SyntheticVideo { frames, meta })
    }
}

/// SplitMix64 finalizer over `(master, stream, index)`, so every video and
/// every adaptation run gets an independent, order-free seed.
pub fn derive_seed(master: u64, stream: u64, index: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xd1b5_4a32_d192_ed03);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stream tags for [`derive_seed`].
pub mod streams {
    pub const VIDEO_STREAM: u64 = 1;
    pub const ADAPT_STREAM: u64 = 2;
    pub const TRAIN_STREAM: u64 = 3;
    pub const VAL_STREAM: u64 = 4;
}

pub fn sidecar_path(tensor_path: &Path) -> PathBuf {
    tensor_path.with_extension("json")
}

/// Labelled frames for supervised training.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameDataset {
    pub frames: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
    /// Frames the generator emitted per class.
    pub ledger: Vec<usize>,
}

impl FrameDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

struct Renderer<'a> {
    templates: &'a ClassTemplates,
    hw: usize,
}

impl Renderer<'_> {
    /// Paint one frame into `out` (`3×hw×hw`) with the template's top-left
    /// corner at `(y0, x0)`.
    fn frame<R: Rng>(&self, out: &mut [f32], class: usize, y0: usize, x0: usize, shift: &Shift, noise: Option<(&Normal<f32>, &mut R)>) {
        let (hw, p) = (self.hw, self.templates.patch());
        out.fill(BACKGROUND);
        let t = self.templates.get(class).data();
        for ch in 0..CHANNELS {
            for y in 0..p {
                let row = &mut out[(ch * hw + y0 + y) * hw + x0..][..p];
                row.copy_from_slice(&t[(ch * p + y) * p..][..p]);
            }
        }
        if let Some((dist, rng)) = noise {
            for v in out.iter_mut() {
                *v += dist.sample(rng);
            }
        }
        if *shift != Shift::identity() {
            let plane = hw * hw;
            for (i, v) in out.iter_mut().enumerate() {
                *v = shift.apply(*v, i / plane);
            }
        }
    }

    fn max_offset(&self) -> usize {
        self.hw - self.templates.patch()
    }
}

fn noise_dist(sigma: f32) -> Result<Option<Normal<f32>>> {
    if sigma == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, sigma).map(Some).map_err(|e| Error::InvalidRange(e.to_string()))
}

/// Random label segmentation of `frames` frames with lengths in
/// `[min_segment, max_segment]` (the final segment absorbs a short remainder)
/// and no two consecutive segments sharing a class.
pub fn random_segments<R: Rng>(frames: usize, classes: usize, min_segment: usize, max_segment: usize, rng: &mut R) -> Vec<Segment> {
    let mut segs: Vec<Segment> = Vec::new();
    let mut start = 0;
    while start < frames {
        let remaining = frames - start;
        let mut len = rng.random_range(min_segment..=max_segment);
        if remaining < len + min_segment {
            len = remaining;
        }
        let class = loop {
            let c = rng.random_range(0..classes);
            if segs.last().is_none_or(|s| s.class != c) {
                break c;
            }
        };
        segs.push(Segment { start, end: start + len, class });
        start += len;
    }
    segs
}

/// Render a video for an explicit segmentation and shift.
pub fn render_video(
    templates: &ClassTemplates,
    hw: usize,
    segments: &[Segment],
    shift: Shift,
    cfg: &DataConfig,
    seed: u64,
) -> Result<SyntheticVideo> {
    if templates.patch() > hw {
        return Err(Error::InvalidRange(format!("patch {} larger than frame {hw}", templates.patch())));
    }
    let frames = segments.last().map_or(0, |s| s.end);
    if frames == 0 || segments.first().map(|s| s.start) != Some(0) || segments.windows(2).any(|w| w[0].end != w[1].start) {
        return Err(Error::InvalidRange("segments must tile [0, T) contiguously".into()));
    }
    if segments.iter().any(|s| s.class >= templates.classes() || s.end <= s.start) {
        return Err(Error::InvalidRange("segment class or bounds invalid".into()));
    }
    let r = Renderer { templates, hw };
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_f00d);
    let dist = noise_dist(cfg.noise_sigma)?;
    let jitter = noise_dist(cfg.frame_jitter)?;
    let plane = CHANNELS * hw * hw;
    let mut data = vec![0.0f32; frames * plane];
    let mut labels = Vec::with_capacity(frames);
    let center = r.max_offset() as f32 / 2.0;
    let amp = cfg.drift_amplitude.min(center);
    for seg in segments {
        let (phase_y, phase_x) = (rng.random_range(0.0..2.0 * PI), rng.random_range(0.0..2.0 * PI));
        for t in seg.start..seg.end {
            let w = 2.0 * PI * t as f32 / cfg.drift_period;
            let y0 = (center + amp * (w + phase_y).sin()).round().clamp(0.0, r.max_offset() as f32) as usize;
            let x0 = (center + amp * (w + phase_x).cos()).round().clamp(0.0, r.max_offset() as f32) as usize;
            let frame_shift = match &jitter {
                Some(j) => Shift { brightness: shift.brightness + j.sample(&mut rng), ..shift },
                None => shift,
            };
            let out = &mut data[t * plane..(t + 1) * plane];
            r.frame(out, seg.class, y0, x0, &frame_shift, dist.as_ref().map(|d| (d, &mut rng)));
            labels.push(seg.class);
        }
    }
    Ok(SyntheticVideo {
        frames: Tensor::new([frames, CHANNELS, hw, hw], data)?,
        meta: VideoMeta { labels, segments: segments.to_vec(), shift, noise_sigma: cfg.noise_sigma, seed },
    })
}

/// A test video: random segmentation, one shift drawn from `shift_range`.
pub fn generate_video(
    templates: &ClassTemplates,
    hw: usize,
    cfg: &DataConfig,
    shift_range: &ShiftRanges,
    seed: u64,
) -> Result<SyntheticVideo> {
    cfg.validate()?;
    shift_range.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let segments = random_segments(cfg.frames, templates.classes(), cfg.min_segment, cfg.max_segment, &mut rng);
    let shift = shift_range.sample(&mut rng);
    render_video(templates, hw, &segments, shift, cfg, rng.random())
}

/// Independent frames with exactly `counts[j]` samples of class `j`, each
/// with its own position and shift, in shuffled order.
pub fn generate_frame_dataset(
    templates: &ClassTemplates,
    hw: usize,
    counts: &[usize],
    shift_range: &ShiftRanges,
    cfg: &DataConfig,
    seed: u64,
) -> Result<FrameDataset> {
    shift_range.validate()?;
    if counts.len() != templates.classes() {
        return Err(Error::InvalidRange(format!("{} counts for {} classes", counts.len(), templates.classes())));
    }
    let r = Renderer { templates, hw };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels: Vec<usize> = counts.iter().enumerate().flat_map(|(c, &n)| std::iter::repeat_n(c, n)).collect();
    if labels.is_empty() {
        return Err(Error::InvalidRange("empty dataset".into()));
    }
    labels.shuffle(&mut rng);
    let dist = noise_dist(cfg.noise_sigma)?;
    let plane = CHANNELS * hw * hw;
    let mut data = vec![0.0f32; labels.len() * plane];
    let center = r.max_offset() as f32 / 2.0;
    let amp = cfg.drift_amplitude.min(center);
    for (i, &class) in labels.iter().enumerate() {
        let shift = shift_range.sample(&mut rng);
        let jitter = |rng: &mut ChaCha8Rng| (center + rng.random_range(-amp..=amp)).round() as usize;
        let (y0, x0) = (jitter(&mut rng), jitter(&mut rng));
        r.frame(&mut data[i * plane..(i + 1) * plane], class, y0, x0, &shift, dist.as_ref().map(|d| (d, &mut rng)));
    }
    Ok(FrameDataset {
        frames: Tensor::new([labels.len(), CHANNELS, hw, hw], data)?,
        labels,
        classes: templates.classes(),
        ledger: counts.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> DataConfig {
        DataConfig { frames: 60, min_segment: 10, max_segment: 20, ..DataConfig::default() }
    }

    #[test]
    fn identity_shift_without_noise_shows_exact_template() {
        let templates = ClassTemplates::generate(8, 12, 1);
        let c = DataConfig { noise_sigma: 0.0, drift_amplitude: 0.0, ..cfg() };
        let segs = [Segment { start: 0, end: 3, class: 5 }, Segment { start: 3, end: 5, class: 2 }];
        let v = render_video(&templates, 32, &segs, Shift::identity(), &c, 9).unwrap();
        let frame = v.frames.select(&[4]).unwrap();
        let t = templates.get(2).data();
        for ch in 0..3 {
            for y in 0..12 {
                for x in 0..12 {
                    assert_eq!(frame.data()[(ch * 32 + 10 + y) * 32 + 10 + x], t[(ch * 12 + y) * 12 + x]);
                }
            }
        }
        assert_eq!(frame.data()[0], 0.5);
        assert_eq!(v.labels(), &[5, 5, 5, 2, 2]);
    }

    #[test]
    fn same_seed_same_video() {
        let templates = ClassTemplates::generate(8, 12, 1);
        let a = generate_video(&templates, 32, &cfg(), &DataConfig::default().test_shift, 44).unwrap();
        let b = generate_video(&templates, 32, &cfg(), &DataConfig::default().test_shift, 44).unwrap();
        assert_eq!(a, b);
        let c = generate_video(&templates, 32, &cfg(), &DataConfig::default().test_shift, 45).unwrap();
        assert_ne!(a.frames, c.frames);
    }

    #[test]
    fn segments_are_coherent() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let frames = rng.random_range(50..500);
            let segs = random_segments(frames, 8, 25, 75, &mut rng);
            assert_eq!(segs[0].start, 0);
            assert_eq!(segs.last().unwrap().end, frames);
            for w in segs.windows(2) {
                assert_eq!(w[0].end, w[1].start);
                assert_ne!(w[0].class, w[1].class);
            }
            assert!(segs.iter().all(|s| s.end - s.start >= 25));
        }
    }

    #[test]
    fn labels_follow_requested_segmentation() {
        let templates = ClassTemplates::generate(8, 12, 1);
        let segs = [Segment { start: 0, end: 30, class: 1 }, Segment { start: 30, end: 55, class: 7 }];
        let v = render_video(&templates, 32, &segs, Shift::identity(), &cfg(), 0).unwrap();
        assert!(v.labels()[..30].iter().all(|&c| c == 1));
        assert!(v.labels()[30..].iter().all(|&c| c == 7));
        assert_eq!(v.meta.segments, segs);
    }

    #[test]
    fn shift_is_drawn_from_range_once_per_video() {
        let templates = ClassTemplates::generate(8, 12, 1);
        let range = DataConfig::default().test_shift;
        let v = generate_video(&templates, 32, &cfg(), &range, 5).unwrap();
        assert!(range.contains(&v.meta.shift));
    }

    #[test]
    fn dataset_counts_match_ledger() {
        let templates = ClassTemplates::generate(8, 12, 1);
        let counts = [30, 3, 3, 3, 3, 3, 3, 3];
        let d = generate_frame_dataset(&templates, 32, &counts, &cfg().train_shift, &cfg(), 2).unwrap();
        for c in 0..8 {
            assert_eq!(d.labels.iter().filter(|&&l| l == c).count(), d.ledger[c]);
        }
        assert_eq!(d.frames.dim(0), 51);
    }

    #[test]
    fn invalid_ranges_rejected() {
        let bad = ShiftRanges { contrast: [1.2, 0.8], ..ShiftRanges::default() };
        assert!(matches!(bad.validate(), Err(Error::InvalidRange(_))));
        let short = DataConfig { frames: 30, min_segment: 25, ..DataConfig::default() };
        assert!(short.validate().is_err());
    }
}
