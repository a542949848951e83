//! Dense row-major `f32` tensors and the numerical kernels the model needs.
//!
//! [`Tensor`] is an immutable-by-convention value type. Differentiable
//! computation is recorded separately on a [`crate::autodiff::Tape`].

mod conv;
mod io;

pub use conv::{conv2d, conv2d_backward, conv2d_direct, conv_output_hw};
pub use io::{read_tensor, write_tensor, TTEN_MAGIC, TTEN_VERSION};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
}

impl BinaryKind {
    #[inline]
    fn apply(self, a: f32, b: f32) -> f32 {
        match self {
            BinaryKind::Add => a + b,
            BinaryKind::Sub => a - b,
            BinaryKind::Mul => a * b,
        }
    }
}

impl Tensor {
    pub fn new(shape: impl Into<Vec<usize>>, data: Vec<f32>) -> Result<Self> {
        let shape = shape.into();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::ShapeMismatch(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn full(shape: impl Into<Vec<usize>>, value: f32) -> Self {
        let shape = shape.into();
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    pub fn zeros(shape: impl Into<Vec<usize>>) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn scalar(value: f32) -> Self {
        Tensor { shape: Vec::new(), data: vec![value] }
    }

    pub fn from_vec(data: Vec<f32>) -> Self {
        Tensor { shape: vec![data.len()], data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    /// Single element of a scalar (or one-element) tensor.
    pub fn item(&self) -> Option<f32> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Self> {
        Tensor::new(shape, self.data)
    }

    /// Dimension `i`, panicking on out-of-range axes.
    pub fn dim(&self, i: usize) -> usize {
        self.shape[i]
    }

    /// Rows of a rank-2 tensor.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        let cols = self.shape.last().copied().unwrap_or(1);
        self.data.chunks(cols)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape[1];
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Gather leading-axis slices, e.g. frames of a `T×C×H×W` video.
    pub fn select(&self, indices: &[usize]) -> Result<Tensor> {
        if self.rank() == 0 || indices.is_empty() {
            return Err(Error::ShapeMismatch("select needs rank >= 1 and indices".into()));
        }
        let lead = self.shape[0];
        let stride = self.data.len() / lead;
        let mut data = Vec::with_capacity(indices.len() * stride);
        for &i in indices {
            if i >= lead {
                return Err(Error::ShapeMismatch(format!("index {i} out of range for axis of {lead}")));
            }
            data.extend_from_slice(&self.data[i * stride..(i + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Ok(Tensor { shape, data })
    }

    /// Concatenate along the leading axis.
    pub fn concat(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or_else(|| Error::ShapeMismatch("concat of nothing".into()))?;
        let tail = &first.shape[1..];
        let mut lead = 0;
        let mut data = Vec::new();
        for p in parts {
            if p.rank() == 0 || &p.shape[1..] != tail {
                return Err(Error::ShapeMismatch(format!("cannot concat {:?} with {:?}", p.shape, first.shape)));
            }
            lead += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = first.shape.clone();
        shape[0] = lead;
        Ok(Tensor { shape, data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        binop(self, other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        binop(self, other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        binop(self, other, BinaryKind::Mul)
    }

    pub fn scale(&self, factor: f32) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f32 {
        self.data.iter().sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }

    pub fn transpose2d(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::ShapeMismatch(format!("transpose needs rank 2, got {:?}", self.shape)));
        }
        let (r, c) = (self.shape[0], self.shape[1]);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = self.data[i * c + j];
            }
        }
        Ok(Tensor { shape: vec![c, r], data: out })
    }

    /// Row-wise argmax of a rank-2 tensor, ties to the lowest index.
    pub fn argmax_rows(&self) -> Vec<usize> {
        self.rows().map(argmax).collect()
    }
}

/// Index of the largest value, ties broken by lowest index.
pub fn argmax(values: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i < rank - a.len() { 1 } else { a[i - (rank - a.len())] };
        let db = if i < rank - b.len() { 1 } else { b[i - (rank - b.len())] };
        out[i] = match (da, db) {
            _ if da == db => da,
            (1, d) | (d, 1) => d,
            _ => return Err(Error::ShapeMismatch(format!("cannot broadcast {a:?} with {b:?}"))),
        };
    }
    Ok(out)
}

/// Element strides of `shape` viewed inside the broadcast `out` shape
/// (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visit every index of `out`, yielding the flat offsets into `a` and `b`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let numel: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..numel {
        f(oa, ob);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

pub fn binop(a: &Tensor, b: &Tensor, kind: BinaryKind) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| kind.apply(x, y)).collect();
        return Ok(Tensor { shape: a.shape.clone(), data });
    }
    let out = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = Vec::with_capacity(out.iter().product());
    for_each_broadcast(&out, &sa, &sb, |ia, ib| data.push(kind.apply(a.data[ia], b.data[ib])));
    Ok(Tensor { shape: out, data })
}

/// Sum `grad` (shaped like a broadcast result) back down to `shape`.
pub fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let out = &grad.shape;
    let st = broadcast_strides(shape, out);
    let mut acc = vec![0.0f32; shape.iter().product()];
    let ones = vec![0usize; out.len()];
    let mut k = 0;
    for_each_broadcast(out, &st, &ones, |i, _| {
        acc[i] += grad.data[k];
        k += 1;
    });
    Tensor { shape: shape.to_vec(), data: acc }
}

/// `[m×n]·[n×p]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.rank() != 2 || b.rank() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::ShapeMismatch(format!("matmul {:?} x {:?}", a.shape, b.shape)));
    }
    let (m, n, p) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0f32; m * p];
    matmul_into(&a.data, &b.data, &mut out, m, n, p);
    Ok(Tensor { shape: vec![m, p], data: out })
}

/// Row-major operand view: element `(i, j)` lives at `i * row + j * col`.
#[derive(Clone, Copy)]
pub(crate) struct Strided<'a> {
    pub data: &'a [f32],
    pub row: usize,
    pub col: usize,
}

impl<'a> Strided<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Strided { data, row: cols, col: 1 }
    }

    /// The transpose of a row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        Strided { data, row: 1, col: cols }
    }
}

/// `out[m×p] += a[m×n]·b[n×p]`.
pub(crate) fn matmul_into(a: &[f32], b: &[f32], out: &mut [f32], m: usize, n: usize, p: usize) {
    gemm_acc(Strided::rows(a, n), Strided::rows(b, p), out, m, n, p);
}

/// `out[m×p] += a·b` for strided operands. Packed single-threaded SGEMM: the
/// summation order depends only on the shapes, so repeated runs on one
/// machine are bit-identical.
pub(crate) fn gemm_acc(a: Strided<'_>, b: Strided<'_>, out: &mut [f32], m: usize, n: usize, p: usize) {
    let span = |s: Strided<'_>, r: usize, c: usize| if r == 0 || c == 0 { 0 } else { (r - 1) * s.row + (c - 1) * s.col + 1 };
    assert!(a.data.len() >= span(a, m, n) && b.data.len() >= span(b, n, p) && out.len() >= m * p, "gemm operand too short");
    if m == 0 || p == 0 {
        return;
    }
    // SAFETY: the assertion above keeps every strided access in bounds, and
    // `out` is an exclusive borrow that cannot alias the inputs.
    unsafe {
        matrixmultiply::sgemm(
            m,
            n,
            p,
            1.0,
            a.data.as_ptr(),
            a.row as isize,
            a.col as isize,
            b.data.as_ptr(),
            b.row as isize,
            b.col as isize,
            1.0,
            out.as_mut_ptr(),
            p as isize,
            1,
        );
    }
}
