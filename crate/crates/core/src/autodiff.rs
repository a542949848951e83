//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value plus whatever it
//! needs for the backward pass. Nodes only reference earlier nodes, so the
//! tape is always in topological order and [`Tape::backward`] is a single
//! reverse sweep.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{self, BinaryKind, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    Train,
    #[default]
    Eval,
}

/// Running statistics after a train-mode batch-norm forward.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Tensor,
    pub var: Tensor,
}

enum Op {
    Leaf,
    Binary { kind: BinaryKind, a: Var, b: Var },
    Scale { x: Var, factor: f32 },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Conv2d { input: Var, kernel: Var, stride: usize, pad: usize },
    BatchNorm { input: Var, gamma: Var, beta: Var, mean: Vec<f32>, inv_std: Vec<f32>, train: bool },
    Relu { x: Var },
    GlobalAvgPool { x: Var },
    NormalizeRows { x: Var, eps: f32, norms: Vec<f32> },
    Sum { x: Var },
    Mean { x: Var },
    SoftmaxXent { logits: Var, labels: Vec<usize>, probs: Vec<f32> },
    Entropy { logits: Var, probs: Vec<f32>, row_entropy: Vec<f32> },
    SquaredError { x: Var, target: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of the requires-grad leaves, keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    named: BTreeMap<String, Tensor>,
    by_var: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.named.get(name)
    }

    pub fn of(&self, var: Var) -> Option<&Tensor> {
        self.by_var.get(&var)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.named.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.named.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.named.len()
    }

    pub fn is_empty(&self) -> bool {
        self.named.is_empty()
    }

    /// Multiply every gradient by `factor`.
    pub fn scale(&mut self, factor: f32) {
        for t in self.named.values_mut().chain(self.by_var.values_mut()) {
            *t = t.scale(factor);
        }
    }
}

fn check_finite(t: &Tensor, op: &'static str) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, what: &'static str) -> Result<Var> {
        check_finite(&value, what)?;
        self.nodes.push(Node { value, op, requires_grad, name: None });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    /// Unnamed input. Only named leaves show up in [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, name: None });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, name: &str, value: Tensor, requires_grad: bool) -> Var {
        let v = self.leaf(value, requires_grad);
        self.nodes[v.0].name = Some(name.to_owned());
        v
    }

    pub fn binary(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let out = tensor::binop(self.value(a), self.value(b), kind)?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::Binary { kind, a, b }, rg, "binary op")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryKind::Mul)
    }

    pub fn scale(&mut self, x: Var, factor: f32) -> Result<Var> {
        let out = self.value(x).scale(factor);
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale { x, factor }, rg, "scale")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push(out, Op::MatMul { a, b }, rg, "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2d()?;
        let rg = self.rg(&[x]);
        self.push(out, Op::Transpose { x }, rg, "transpose")
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, pad: usize) -> Result<Var> {
        let out = tensor::conv2d(self.value(input), self.value(kernel), stride, pad)?;
        let rg = self.rg(&[input, kernel]);
        self.push(out, Op::Conv2d { input, kernel, stride, pad }, rg, "conv2d")
    }

    /// Batch normalization over the channel axis of an NCHW input.
    ///
    /// Eval mode normalizes with the supplied running statistics and never
    /// produces new ones. Train mode normalizes with batch statistics and
    /// returns the momentum-updated running statistics (unbiased variance).
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running_mean: &Tensor,
        running_var: &Tensor,
        eps: f32,
        mode: BnMode,
        momentum: f32,
    ) -> Result<(Var, Option<RunningStats>)> {
        if !(eps > 0.0) {
            return Err(Error::InvalidConfig(format!("batch-norm eps must be > 0, got {eps}")));
        }
        let x = self.value(input);
        if x.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("batch_norm2d expects NCHW, got {:?}", x.shape())));
        }
        let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
        for t in [self.value(gamma), self.value(beta), running_mean, running_var] {
            if t.shape() != [c] {
                return Err(Error::ShapeMismatch(format!("batch-norm parameter {:?} for {c} channels", t.shape())));
            }
        }
        if let Some(ch) = running_var.data().iter().position(|&v| v < 0.0) {
            return Err(Error::NegativeVariance(ch));
        }
        let xd = x.data();
        let (mean, var, updated) = match mode {
            BnMode::Eval => (running_mean.data().to_vec(), running_var.data().to_vec(), None),
            BnMode::Train => {
                let count = (n * hw) as f64;
                let mut mean = vec![0.0f32; c];
                let mut var = vec![0.0f32; c];
                let mut new_mean = running_mean.clone();
                let mut new_var = running_var.clone();
                for ch in 0..c {
                    let chan = || (0..n).flat_map(move |s| &xd[(s * c + ch) * hw..(s * c + ch + 1) * hw]);
                    let mu = chan().map(|&v| v as f64).sum::<f64>() / count;
                    let ss = chan().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>();
                    mean[ch] = mu as f32;
                    var[ch] = (ss / count) as f32;
                    let unbiased = if count > 1.0 { ss / (count - 1.0) } else { 0.0 };
                    let nm = &mut new_mean.data_mut()[ch];
                    *nm = (1.0 - momentum) * *nm + momentum * mu as f32;
                    let nv = &mut new_var.data_mut()[ch];
                    *nv = (1.0 - momentum) * *nv + momentum * unbiased as f32;
                }
                (mean, var, Some(RunningStats { mean: new_mean, var: new_var }))
            }
        };
        let inv_std: Vec<f32> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![0.0f32; xd.len()];
        for (i, (o, &v)) in out.iter_mut().zip(xd).enumerate() {
            let ch = (i / hw) % c;
            *o = g[ch] * ((v - mean[ch]) * inv_std[ch]) + b[ch];
        }
        let out = Tensor::new(x.shape().to_vec(), out)?;
        let rg = self.rg(&[input, gamma, beta]);
        let train = mode == BnMode::Train;
        let v = self.push(out, Op::BatchNorm { input, gamma, beta, mean, inv_std, train }, rg, "batch_norm2d")?;
        Ok((v, updated))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(out, Op::Relu { x }, rg, "relu")
    }

    /// `N×C×H×W → N×C` mean over the spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(Error::ShapeMismatch(format!("global_avg_pool expects NCHW, got {:?}", t.shape())));
        }
        let (n, c, hw) = (t.dim(0), t.dim(1), t.dim(2) * t.dim(3));
        let out: Vec<f32> = t.data().chunks(hw).map(|m| m.iter().sum::<f32>() / hw as f32).collect();
        let out = Tensor::new([n, c], out)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::GlobalAvgPool { x }, rg, "global_avg_pool")
    }

    /// Rows divided by `(‖row‖₂ + eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: f32) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("normalize_rows expects rank 2, got {:?}", t.shape())));
        }
        let norms: Vec<f32> = t.rows().map(|r| r.iter().map(|v| v * v).sum::<f32>().sqrt()).collect();
        let cols = t.dim(1);
        let data = t.data().iter().enumerate().map(|(i, &v)| v / (norms[i / cols] + eps)).collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        self.push(out, Op::NormalizeRows { x, eps, norms }, rg, "normalize_rows")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(&[x]);
        self.push(out, Op::Sum { x }, rg, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum() / t.len() as f32);
        let rg = self.rg(&[x]);
        self.push(out, Op::Mean { x }, rg, "mean")
    }

    /// Mean softmax cross-entropy of `N×k` logits where `margins[label]` is
    /// subtracted from each row's true-class logit first. All-zero margins
    /// give plain cross-entropy.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize], margins: &[f32]) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 || z.dim(0) != labels.len() || z.dim(1) != margins.len() {
            return Err(Error::ShapeMismatch(format!(
                "cross-entropy over {:?} with {} labels and {} margins",
                z.shape(),
                labels.len(),
                margins.len()
            )));
        }
        let k = z.dim(1);
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = Vec::with_capacity(z.len());
        let mut total = 0.0f64;
        for (row, &y) in z.rows().zip(labels) {
            let shifted: Vec<f64> = row
                .iter()
                .enumerate()
                .map(|(j, &v)| v as f64 - if j == y { margins[y] as f64 } else { 0.0 })
                .collect();
            let m = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = shifted.iter().map(|v| (v - m).exp()).sum();
            let lse = m + denom.ln();
            total += lse - shifted[y];
            probs.extend(shifted.iter().map(|v| ((v - m).exp() / denom) as f32));
        }
        let out = Tensor::scalar((total / labels.len() as f64) as f32);
        let rg = self.rg(&[logits]);
        self.push(out, Op::SoftmaxXent { logits, labels: labels.to_vec(), probs }, rg, "cross_entropy")
    }

    /// Mean over rows of the softmax entropy `−Σ p log p`.
    pub fn softmax_entropy(&mut self, logits: Var) -> Result<Var> {
        let z = self.value(logits);
        if z.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("entropy expects N×k, got {:?}", z.shape())));
        }
        let mut probs = Vec::with_capacity(z.len());
        let mut row_entropy = Vec::with_capacity(z.dim(0));
        for row in z.rows() {
            let m = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let denom: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            let ln_denom = denom.ln();
            let mut h = 0.0f64;
            for &v in row {
                let logp = v as f64 - m - ln_denom;
                let p = logp.exp();
                h -= p * logp;
                probs.push(p as f32);
            }
            row_entropy.push(h as f32);
        }
        let mean = row_entropy.iter().map(|&h| h as f64).sum::<f64>() / row_entropy.len() as f64;
        let out = Tensor::scalar(mean as f32);
        let rg = self.rg(&[logits]);
        self.push(out, Op::Entropy { logits, probs, row_entropy }, rg, "entropy")
    }

    /// Mean over rows of `‖x_row − target_row‖²`. The target is a constant.
    pub fn squared_error(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape() != target.shape() {
            return Err(Error::ShapeMismatch(format!(
                "squared error between {:?} and target {:?}",
                xv.shape(),
                target.shape()
            )));
        }
        let rows = xv.dim(0) as f64;
        let total: f64 = xv.data().iter().zip(target.data()).map(|(&a, &b)| ((a - b) as f64).powi(2)).sum();
        let out = Tensor::scalar((total / rows) as f32);
        let rg = self.rg(&[x]);
        self.push(out, Op::SquaredError { x, target: target.clone() }, rg, "squared_error")
    }

    /// Reverse sweep from a scalar loss. Every requires-grad leaf gets an
    /// entry (zeros if the loss does not depend on it); constant leaves get
    /// none.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !lv.data()[0].is_finite() {
            return Err(Error::NonFiniteLoss(lv.data()[0]));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            for (var, contrib) in self.node_backward(node, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                check_finite(&contrib, "backward")?;
                accumulate(&mut grads[var.0], contrib)?;
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let g = grads[idx].take().unwrap_or_else(|| Tensor::zeros(node.value.shape().to_vec()));
            if let Some(name) = &node.name {
                out.named.insert(name.clone(), g.clone());
            }
            out.by_var.insert(Var(idx), g);
        }
        Ok(out)
    }

    fn node_backward(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| self.value(v);
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            &Op::Binary { kind, a, b } => {
                let (av, bv) = (val(a), val(b));
                let (ga, gb) = match kind {
                    BinaryKind::Add => (g.clone(), g.clone()),
                    BinaryKind::Sub => (g.clone(), g.scale(-1.0)),
                    BinaryKind::Mul => (g.mul(bv)?, g.mul(av)?),
                };
                vec![(a, tensor::sum_to_shape(&ga, av.shape())), (b, tensor::sum_to_shape(&gb, bv.shape()))]
            }
            &Op::Scale { x, factor } => vec![(x, g.scale(factor))],
            &Op::MatMul { a, b } => {
                let mut out = Vec::new();
                if wants(a) {
                    out.push((a, g.matmul(&val(b).transpose2d()?)?));
                }
                if wants(b) {
                    out.push((b, val(a).transpose2d()?.matmul(g)?));
                }
                out
            }
            &Op::Transpose { x } => vec![(x, g.transpose2d()?)],
            &Op::Conv2d { input, kernel, stride, pad } => {
                let (dx, dk) = tensor::conv2d_backward(val(input), val(kernel), g, stride, pad, wants(input))?;
                let mut out = vec![(kernel, dk)];
                if let Some(dx) = dx {
                    out.push((input, dx));
                }
                out
            }
            Op::BatchNorm { input, gamma, beta, mean, inv_std, train } => {
                bn_backward(val(*input), val(*gamma), g, mean, inv_std, *train, (*input, *gamma, *beta))?
            }
            &Op::Relu { x } => {
                let xv = val(x);
                let data = g.data().iter().zip(xv.data()).map(|(&gv, &v)| if v > 0.0 { gv } else { 0.0 }).collect();
                vec![(x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            &Op::GlobalAvgPool { x } => {
                let xv = val(x);
                let hw = xv.dim(2) * xv.dim(3);
                let mut data = Vec::with_capacity(xv.len());
                for &gv in g.data() {
                    data.extend(std::iter::repeat_n(gv / hw as f32, hw));
                }
                vec![(x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            Op::NormalizeRows { x, eps, norms } => {
                let xv = val(*x);
                let mut data = Vec::with_capacity(xv.len());
                for (r, (xr, gr)) in xv.rows().zip(g.rows()).enumerate() {
                    let norm = norms[r];
                    let d = norm + eps;
                    let dot: f32 = xr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    let coef = if norm > 0.0 { dot / (d * d * norm) } else { 0.0 };
                    data.extend(xr.iter().zip(gr).map(|(&xv, &gv)| gv / d - xv * coef));
                }
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
            &Op::Sum { x } => vec![(x, Tensor::full(val(x).shape().to_vec(), g.data()[0]))],
            &Op::Mean { x } => {
                let n = val(x).len() as f32;
                vec![(x, Tensor::full(val(x).shape().to_vec(), g.data()[0] / n))]
            }
            Op::SoftmaxXent { logits, labels, probs } => {
                let z = val(*logits);
                let k = z.dim(1);
                let up = g.data()[0] / labels.len() as f32;
                let mut data = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    data[r * k + y] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= up);
                vec![(*logits, Tensor::new(z.shape().to_vec(), data)?)]
            }
            Op::Entropy { logits, probs, row_entropy } => {
                let z = val(*logits);
                let k = z.dim(1);
                let up = g.data()[0] / row_entropy.len() as f32;
                let data = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let logp = if p > 0.0 { p.ln() } else { 0.0 };
                        -p * (logp + row_entropy[i / k]) * up
                    })
                    .collect();
                vec![(*logits, Tensor::new(z.shape().to_vec(), data)?)]
            }
            Op::SquaredError { x, target } => {
                let xv = val(*x);
                let f = 2.0 * g.data()[0] / xv.dim(0) as f32;
                let data = xv.data().iter().zip(target.data()).map(|(&a, &b)| f * (a - b)).collect();
                vec![(*x, Tensor::new(xv.shape().to_vec(), data)?)]
            }
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, contrib: Tensor) -> Result<()> {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => {
            if acc.shape() != contrib.shape() {
                return Err(Error::ShapeMismatch("gradient accumulation".into()));
            }
            for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
    }
    Ok(())
}

fn bn_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    mean: &[f32],
    inv_std: &[f32],
    train: bool,
    (input, gvar, bvar): (Var, Var, Var),
) -> Result<Vec<(Var, Tensor)>> {
    let (n, c, hw) = (x.dim(0), x.dim(1), x.dim(2) * x.dim(3));
    let (xd, gd, gam) = (x.data(), g.data(), gamma.data());
    let mut dgamma = vec![0.0f32; c];
    let mut dbeta = vec![0.0f32; c];
    for s in 0..n {
        for ch in 0..c {
            let off = (s * c + ch) * hw;
            for i in off..off + hw {
                let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                dgamma[ch] += gd[i] * xhat;
                dbeta[ch] += gd[i];
            }
        }
    }
    let mut dx = vec![0.0f32; xd.len()];
    if train {
        let m = (n * hw) as f32;
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * hw;
                for i in off..off + hw {
                    let xhat = (xd[i] - mean[ch]) * inv_std[ch];
                    dx[i] = gam[ch] * inv_std[ch] / m * (m * gd[i] - dbeta[ch] - xhat * dgamma[ch]);
                }
            }
        }
    } else {
        for (i, d) in dx.iter_mut().enumerate() {
            let ch = (i / hw) % c;
            *d = gd[i] * gam[ch] * inv_std[ch];
        }
    }
    Ok(vec![
        (input, Tensor::new(x.shape().to_vec(), dx)?),
        (gvar, Tensor::new([c], dgamma)?),
        (bvar, Tensor::new([c], dbeta)?),
    ])
}
