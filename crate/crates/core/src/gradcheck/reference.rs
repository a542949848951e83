//! Naive f64 re-implementation of the model and losses, written with plain
//! loops and sharing no kernels with the tape. Finite differences of this
//! forward are free of f32 round-off, and the signs of every relu input are
//! recorded so steps that cross a kink can be recognised.

use std::collections::BTreeMap;

use crate::autodiff::BnMode;
use crate::model::{ModelParams, ModelSpec, BN_EPS, HEAD_INPUT_EPS};

/// Parameters as f64 buffers with their shapes.
#[derive(Clone, Debug)]
pub struct RefParams {
    spec: ModelSpec,
    values: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl RefParams {
    pub fn from_params(params: &ModelParams) -> Self {
        let values = params
            .entries()
            .iter()
            .map(|(n, e)| (n.clone(), (e.tensor.shape().to_vec(), e.tensor.data().iter().map(|&v| v as f64).collect())))
            .collect();
        RefParams { spec: params.spec().clone(), values }
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.values[name].1
    }

    pub fn set(&mut self, name: &str, index: usize, value: f64) {
        self.values.get_mut(name).expect("known parameter").1[index] = value;
    }

    fn shape(&self, name: &str) -> &[usize] {
        &self.values[name].0
    }
}

/// The objective evaluated by the reference.
pub enum RefLoss<'a> {
    /// Softmax cross-entropy with `margins[label]` subtracted from the true
    /// logit.
    Xent { labels: &'a [usize], margins: &'a [f64] },
    Entropy,
    /// Mean over the listed rows of the squared distance to `target`
    /// (row-major `N×k`).
    Squared { rows: &'a [usize], target: &'a [f64] },
}

pub struct RefEval {
    pub loss: f64,
    /// `input > 0` for every relu input, in evaluation order.
    pub relu_signs: Vec<bool>,
}

struct Act {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

fn conv(x: &Act, k: &[f64], kshape: &[usize], stride: usize, pad: usize) -> Act {
    let (co, ci, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    assert_eq!(ci, x.c);
    let oh = (x.h + 2 * pad - kh) / stride + 1;
    let ow = (x.w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; x.n * co * oh * ow];
    for s in 0..x.n {
        for o in 0..co {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = 0.0;
                    for c in 0..ci {
                        for u in 0..kh {
                            for v in 0..kw {
                                let y = (i * stride + u) as isize - pad as isize;
                                let xx = (j * stride + v) as isize - pad as isize;
                                if y < 0 || xx < 0 || y >= x.h as isize || xx >= x.w as isize {
                                    continue;
                                }
                                let xi = ((s * ci + c) * x.h + y as usize) * x.w + xx as usize;
                                acc += x.data[xi] * k[((o * ci + c) * kh + u) * kw + v];
                            }
                        }
                    }
                    out[((s * co + o) * oh + i) * ow + j] = acc;
                }
            }
        }
    }
    Act { n: x.n, c: co, h: oh, w: ow, data: out }
}

fn batch_norm(x: &mut Act, p: &RefParams, prefix: &str, mode: BnMode) {
    let hw = x.h * x.w;
    let gamma = p.get(&format!("{prefix}.gamma"));
    let beta = p.get(&format!("{prefix}.beta"));
    for c in 0..x.c {
        let (mean, var) = match mode {
            BnMode::Eval => (p.get(&format!("{prefix}.running_mean"))[c], p.get(&format!("{prefix}.running_var"))[c]),
            BnMode::Train => {
                let vals: Vec<f64> = (0..x.n).flat_map(|s| x.data[(s * x.c + c) * hw..(s * x.c + c + 1) * hw].to_vec()).collect();
                let m = vals.iter().sum::<f64>() / vals.len() as f64;
                let v = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
                (m, v)
            }
        };
        let scale = gamma[c] / (var + BN_EPS as f64).sqrt();
        for s in 0..x.n {
            for v in &mut x.data[(s * x.c + c) * hw..(s * x.c + c + 1) * hw] {
                *v = (*v - mean) * scale + beta[c];
            }
        }
    }
}

fn relu(data: &mut [f64], signs: &mut Vec<bool>) {
    for v in data {
        signs.push(*v > 0.0);
        *v = v.max(0.0);
    }
}

/// Logits (`N×k`, row-major) and the loss for a batch given as f32 NCHW data.
pub fn evaluate(p: &RefParams, batch: &[f32], n: usize, mode: BnMode, loss: &RefLoss<'_>) -> RefEval {
    let spec = &p.spec;
    let hw = spec.input_hw;
    let mut signs = Vec::new();
    let mut x = Act { n, c: spec.in_channels, h: hw, w: hw, data: batch.iter().map(|&v| v as f64).collect() };
    for (si, stage) in spec.stages.iter().enumerate() {
        for bi in 0..stage.blocks {
            let pre = format!("stage{si}.block{bi}");
            let stride = if bi == 0 { 2 } else { 1 };
            let w1 = format!("{pre}.conv1.weight");
            let mut h = conv(&x, p.get(&w1), p.shape(&w1), stride, 1);
            batch_norm(&mut h, p, &format!("{pre}.bn1"), mode);
            relu(&mut h.data, &mut signs);
            let w2 = format!("{pre}.conv2.weight");
            let mut h = conv(&h, p.get(&w2), p.shape(&w2), 1, 1);
            batch_norm(&mut h, p, &format!("{pre}.bn2"), mode);
            if bi == 0 {
                let wp = format!("{pre}.proj.weight");
                let skip = conv(&x, p.get(&wp), p.shape(&wp), 2, 0);
                for (a, b) in h.data.iter_mut().zip(&skip.data) {
                    *a += b;
                }
            } else {
                for (a, b) in h.data.iter_mut().zip(&x.data) {
                    *a += b;
                }
            }
            relu(&mut h.data, &mut signs);
            x = h;
        }
    }
    let plane = x.h * x.w;
    let pooled: Vec<f64> = x.data.chunks(plane).map(|m| m.iter().sum::<f64>() / plane as f64).collect();
    let (cin, hid, k) = (x.c, spec.head_hidden, spec.num_classes);
    let (fw, fb, ow) = (p.get("head.fc.weight"), p.get("head.fc.bias"), p.get("head.out.weight"));
    let mut hidden = vec![0.0; n * hid];
    for s in 0..n {
        for j in 0..hid {
            hidden[s * hid + j] = fb[j] + (0..cin).map(|i| pooled[s * cin + i] * fw[i * hid + j]).sum::<f64>();
        }
    }
    relu(&mut hidden, &mut signs);
    let wnorm: Vec<f64> = (0..k).map(|c| ow[c * hid..(c + 1) * hid].iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut logits = vec![0.0; n * k];
    for s in 0..n {
        let row = &hidden[s * hid..(s + 1) * hid];
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt() + HEAD_INPUT_EPS as f64;
        for c in 0..k {
            let dot: f64 = row.iter().zip(&ow[c * hid..(c + 1) * hid]).map(|(a, b)| a * b).sum();
            logits[s * k + c] = spec.head_scale as f64 * dot / (norm * wnorm[c]);
        }
    }
    let log_softmax = |row: &[f64]| -> Vec<f64> {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        row.iter().map(|v| v - lse).collect()
    };
    let loss = match loss {
        RefLoss::Xent { labels, margins } => {
            (0..n)
                .map(|s| {
                    let mut row = logits[s * k..(s + 1) * k].to_vec();
                    row[labels[s]] -= margins[labels[s]];
                    -log_softmax(&row)[labels[s]]
                })
                .sum::<f64>()
                / n as f64
        }
        RefLoss::Entropy => {
            (0..n)
                .map(|s| log_softmax(&logits[s * k..(s + 1) * k]).iter().map(|lp| -lp.exp() * lp).sum::<f64>())
                .sum::<f64>()
                / n as f64
        }
        RefLoss::Squared { rows, target } => {
            rows.iter()
                .map(|&s| (0..k).map(|c| (logits[s * k + c] - target[s * k + c]).powi(2)).sum::<f64>())
                .sum::<f64>()
                / rows.len() as f64
        }
    };
    RefEval { loss, relu_signs: signs }
}
