//! Forward and adjoint kernels for the dense primitives recorded on the tape.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = op(a) * op(b) (+ c)`, with `op` an optional transpose. `a` is stored
/// row-major as `m x k` (or `k x m` when `ta`), `b` as `k x n` (or `n x k`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices hold exactly the extents described by the strides,
    // as checked by the debug assertions above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.expect_rank(2, "matmul lhs")?;
    b.expect_rank(2, "matmul rhs")?;
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let (k2, n) = (b.shape()[0], b.shape()[1]);
    if k != k2 {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm(m, k, n, a.data(), false, b.data(), false, &mut out, false);
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// Gradients of `a * b` given the upstream gradient `g` of shape `m x n`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut ga = vec![0.0; m * k];
    gemm(m, n, k, g.data(), false, b.data(), true, &mut ga, false);
    let mut gb = vec![0.0; k * n];
    gemm(k, m, n, a.data(), true, g.data(), false, &mut gb, false);
    (
        Tensor::from_parts(vec![m, k], ga),
        Tensor::from_parts(vec![k, n], gb),
    )
}

/// Geometry of a batched 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    /// Accepts `x` as `C x H x W` (batch of one) or `N x C x H x W`, and `w`
    /// as `C_out x C_in x k x k`. Output extents use floor division.
    pub fn new(x_shape: &[usize], w_shape: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (batch, c_in, h, w) = match *x_shape {
            [c, h, w] => (1, c, h, w),
            [n, c, h, w] => (n, c, h, w),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d input must be CxHxW or NxCxHxW, got {x_shape:?}"
                )))
            }
        };
        let [c_out, wc_in, kh, kw] = *w_shape else {
            return Err(Error::shape(format!(
                "conv2d kernel must be C_out x C_in x k x k, got {w_shape:?}"
            )));
        };
        if wc_in != c_in {
            return Err(Error::shape(format!(
                "conv2d kernel expects {wc_in} input channels, input has {c_in}"
            )));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape(format!("conv2d kernel must be square and odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::shape("conv2d stride must be positive"));
        }
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Error::shape(format!(
                "conv2d kernel {kh} larger than padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            batch,
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kh) / stride + 1,
        })
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    pub fn out_shape(&self, batched: bool) -> Vec<usize> {
        if batched {
            vec![self.batch, self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.h_out, self.w_out]
        }
    }

    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncol = self.col_cols();
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let dst = &mut cols[row * ncol..(row + 1) * ncol];
                    for oi in 0..self.h_out {
                        let ii = (oi * s + ki) as isize - p;
                        let line = &mut dst[oi * self.w_out..(oi + 1) * self.w_out];
                        if ii < 0 || ii >= self.h as isize {
                            line.fill(0.0);
                            continue;
                        }
                        let src = &plane[ii as usize * self.w..(ii as usize + 1) * self.w];
                        for (oj, d) in line.iter_mut().enumerate() {
                            let jj = (oj * s + kj) as isize - p;
                            *d = if jj < 0 || jj >= self.w as isize {
                                0.0
                            } else {
                                src[jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], gx: &mut [f64]) {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncol = self.col_cols();
        for c in 0..self.c_in {
            let plane = &mut gx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let src = &cols[row * ncol..(row + 1) * ncol];
                    for oi in 0..self.h_out {
                        let ii = (oi * s + ki) as isize - p;
                        if ii < 0 || ii >= self.h as isize {
                            continue;
                        }
                        let base = ii as usize * self.w;
                        for oj in 0..self.w_out {
                            let jj = (oj * s + kj) as isize - p;
                            if jj >= 0 && jj < self.w as isize {
                                plane[base + jj as usize] += src[oi * self.w_out + oj];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * ncol;
    let mut out = vec![0.0; g.batch * out_stride];
    let mut cols = vec![0.0; rows * ncol];
    for n in 0..g.batch {
        g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
        gemm(
            g.c_out,
            rows,
            ncol,
            w.data(),
            false,
            &cols,
            false,
            &mut out[n * out_stride..(n + 1) * out_stride],
            false,
        );
    }
    Ok(Tensor::from_parts(g.out_shape(x.rank() == 4), out))
}

/// Gradients of `conv2d(x, w)` with respect to `x` and `w`; either can be
/// skipped.
pub(crate) fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    gout: &Tensor,
    stride: usize,
    pad: usize,
    need_x: bool,
    need_w: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let g = ConvGeom::new(x.shape(), w.shape(), stride, pad)?;
    let (rows, ncol) = (g.col_rows(), g.col_cols());
    let in_stride = g.c_in * g.h * g.w;
    let out_stride = g.c_out * ncol;
    let mut gx = vec![0.0; x.numel()];
    let mut gw = vec![0.0; w.numel()];
    let mut cols = vec![0.0; rows * ncol];
    let mut gcols = vec![0.0; rows * ncol];
    for n in 0..g.batch {
        let go = &gout.data()[n * out_stride..(n + 1) * out_stride];
        if need_w {
            g.im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &mut cols);
            gemm(g.c_out, ncol, rows, go, false, &cols, true, &mut gw, true);
        }
        if need_x {
            gemm(rows, g.c_out, ncol, w.data(), true, go, false, &mut gcols, false);
            g.col2im(&gcols, &mut gx[n * in_stride..(n + 1) * in_stride]);
        }
    }
    Ok((
        need_x.then(|| Tensor::from_parts(x.shape().to_vec(), gx)),
        need_w.then(|| Tensor::from_parts(w.shape().to_vec(), gw)),
    ))
}

/// Splits a shape `[N, C, rest..]` into `(N, C, prod(rest))`.
pub(crate) fn channel_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "expected at least N x C dimensions, got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

pub fn numerically_stable_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}
