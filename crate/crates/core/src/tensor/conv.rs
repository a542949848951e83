use rayon::prelude::*;

use super::{Strided, Tensor};
use crate::error::{Error, Result};

/// Output spatial size of a zero-padded convolution.
pub fn conv_output_hw(
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize)> {
    if stride < 1 {
        return Err(Error::InvalidStride(stride));
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(Error::ShapeMismatch(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * pad,
            w + 2 * pad
        )));
    }
    Ok(((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1))
}

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn new(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        if input.rank() != 4 || kernel.rank() != 4 {
            return Err(Error::ShapeMismatch(format!(
                "conv2d expects NCHW input and FCkk kernel, got {:?} and {:?}",
                input.shape(),
                kernel.shape()
            )));
        }
        let [n, c, h, w] = [input.dim(0), input.dim(1), input.dim(2), input.dim(3)];
        let [f, kc, kh, kw] = [kernel.dim(0), kernel.dim(1), kernel.dim(2), kernel.dim(3)];
        if kc != c {
            return Err(Error::ShapeMismatch(format!("kernel has {kc} input channels, input has {c}")));
        }
        let (oh, ow) = conv_output_hw(h, w, kh, kw, stride, pad)?;
        Ok(Geometry { n, c, h, w, f, kh, kw, oh, ow, stride, pad })
    }

    fn patch_len(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn in_len(&self) -> usize {
        self.c * self.h * self.w
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if inside.
    #[inline]
    fn src(&self, o: usize, k: usize, limit: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < limit).then_some(pos as usize)
    }

    /// Output positions `lo..hi` whose tap `k` lands inside `0..limit`.
    #[inline]
    fn inside(&self, k: usize, limit: usize, outlen: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(k).div_ceil(self.stride);
        let hi = (limit + self.pad).saturating_sub(k).div_ceil(self.stride).min(outlen);
        (lo.min(hi), hi)
    }

    fn im2col(&self, x: &[f32], cols: &mut [f32]) {
        let p = self.out_pixels();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &mut cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    let (lo, hi) = self.inside(j, self.w, self.ow);
                    for oy in 0..self.oh {
                        let dst = &mut row[oy * self.ow..(oy + 1) * self.ow];
                        let Some(y) = self.src(oy, i, self.h) else {
                            dst.fill(0.0);
                            continue;
                        };
                        dst[..lo].fill(0.0);
                        dst[hi..].fill(0.0);
                        if lo < hi {
                            let first = lo * self.stride + j - self.pad;
                            let src = &x[(c * self.h + y) * self.w + first..];
                            for (d, s) in dst[lo..hi].iter_mut().zip(src.iter().step_by(self.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f32], dx: &mut [f32]) {
        let p = self.out_pixels();
        for c in 0..self.c {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let row = &cols[((c * self.kh + i) * self.kw + j) * p..][..p];
                    let (lo, hi) = self.inside(j, self.w, self.ow);
                    if lo == hi {
                        continue;
                    }
                    let first = lo * self.stride + j - self.pad;
                    for oy in 0..self.oh {
                        let Some(y) = self.src(oy, i, self.h) else { continue };
                        let dst = &mut dx[(c * self.h + y) * self.w + first..];
                        let src = &row[oy * self.ow + lo..oy * self.ow + hi];
                        for (d, s) in dst.iter_mut().step_by(self.stride).zip(src) {
                            *d += *s;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D cross-correlation via im2col.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(input, kernel, stride, pad)?;
    let (pl, p) = (g.patch_len(), g.out_pixels());
    let mut out = vec![0.0f32; g.n * g.f * p];
    out.par_chunks_mut(g.f * p).zip(input.data().par_chunks(g.in_len())).for_each(|(o, x)| {
        let mut cols = vec![0.0f32; pl * p];
        g.im2col(x, &mut cols);
        super::matmul_into(kernel.data(), &cols, o, g.f, pl, p);
    });
    Tensor::new([g.n, g.f, g.oh, g.ow], out)
}

/// Reference convolution with the plain nested loops.
pub fn conv2d_direct(input: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = Geometry::new(input, kernel, stride, pad)?;
    let (x, k) = (input.data(), kernel.data());
    let mut out = vec![0.0f32; g.n * g.f * g.out_pixels()];
    for n in 0..g.n {
        for f in 0..g.f {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0f32;
                    for c in 0..g.c {
                        for i in 0..g.kh {
                            let Some(y) = g.src(oy, i, g.h) else { continue };
                            for j in 0..g.kw {
                                let Some(xx) = g.src(ox, j, g.w) else { continue };
                                acc += k[((f * g.c + c) * g.kh + i) * g.kw + j]
                                    * x[((n * g.c + c) * g.h + y) * g.w + xx];
                            }
                        }
                    }
                    out[((n * g.f + f) * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new([g.n, g.f, g.oh, g.ow], out)
}

/// Gradients of [`conv2d`] with respect to its input (when requested) and
/// kernel. Per-sample kernel contributions are summed in sample order so the
/// result does not depend on thread scheduling.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    need_input: bool,
) -> Result<(Option<Tensor>, Tensor)> {
    let g = Geometry::new(input, kernel, stride, pad)?;
    let (pl, p) = (g.patch_len(), g.out_pixels());
    if grad_out.shape() != [g.n, g.f, g.oh, g.ow] {
        return Err(Error::ShapeMismatch(format!("conv2d grad {:?}", grad_out.shape())));
    }
    let k = kernel.data();
    let per_sample: Vec<(Vec<f32>, Option<Vec<f32>>)> = input
        .data()
        .par_chunks(g.in_len())
        .zip(grad_out.data().par_chunks(g.f * p))
        .map(|(x, go)| {
            let mut cols = vec![0.0f32; pl * p];
            g.im2col(x, &mut cols);
            let mut dk = vec![0.0f32; g.f * pl];
            super::gemm_acc(Strided::rows(go, p), Strided::transposed(&cols, p), &mut dk, g.f, p, pl);
            let dx = need_input.then(|| {
                // dCols = Kᵀ · dOut
                cols.fill(0.0);
                super::gemm_acc(Strided::transposed(k, pl), Strided::rows(go, p), &mut cols, pl, g.f, p);
                let mut dx = vec![0.0f32; g.in_len()];
                g.col2im(&cols, &mut dx);
                dx
            });
            (dk, dx)
        })
        .collect();

    let mut dk = vec![0.0f32; g.f * pl];
    let mut dx = need_input.then(|| Vec::with_capacity(g.n * g.in_len()));
    for (sk, sx) in per_sample {
        for (a, b) in dk.iter_mut().zip(sk) {
            *a += b;
        }
        if let (Some(acc), Some(sx)) = (dx.as_mut(), sx) {
            acc.extend_from_slice(&sx);
        }
    }
    let dx = dx.map(|d| Tensor::new(input.shape().to_vec(), d)).transpose()?;
    Ok((dx, Tensor::new(kernel.shape().to_vec(), dk)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_copies_input() {
        let x = Tensor::new([1, 1, 3, 3], (0..9).map(|v| v as f32).collect()).unwrap();
        let k = Tensor::new([1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(conv2d(&x, &k, 1, 0).unwrap(), x);
    }

    #[test]
    fn zero_kernel_gives_zero() {
        let x = Tensor::full([2, 2, 4, 4], 3.0);
        let k = Tensor::zeros([3, 2, 3, 3]);
        let y = conv2d(&x, &k, 1, 1).unwrap();
        assert_eq!(y.shape(), &[2, 3, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_size_and_errors() {
        assert_eq!(conv_output_hw(32, 32, 3, 3, 2, 1).unwrap(), (16, 16));
        assert_eq!(conv_output_hw(5, 5, 3, 3, 1, 0).unwrap(), (3, 3));
        assert!(matches!(conv_output_hw(5, 5, 3, 3, 0, 0), Err(Error::InvalidStride(0))));
        assert!(matches!(conv_output_hw(2, 2, 5, 5, 1, 1), Err(Error::ShapeMismatch(_))));
        let x = Tensor::zeros([1, 2, 4, 4]);
        assert!(conv2d(&x, &Tensor::zeros([1, 3, 3, 3]), 1, 1).is_err());
    }
}
