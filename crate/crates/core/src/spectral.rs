//! Two-dimensional Fourier analysis of feature maps and Gaussian low-pass
//! band splitting.
//!
//! Transforms act independently on every trailing `H x W` plane of a tensor,
//! so a `C x H x W` feature map and an `N x C x H x W` batch are handled the
//! same way. The forward transform is unnormalized; the inverse carries the
//! `1 / (H W)` factor.
//!
//! Frequency positions are stored in natural order, index `(u, v)` holding
//! the bin with row wavenumber `u` and column wavenumber `v`. The zero
//! frequency sits at `(0, 0)`; distances to it are measured with circular
//! wrap-around, which is the same as measuring distance to the centre of a
//! shifted spectrum.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Imaginary residue below which the inverse transform output is accepted
/// as real.
pub const SYMMETRY_TOLERANCE: f64 = 1e-6;

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

/// Forward and inverse 1D transforms of a fixed length. Neither direction
/// normalizes.
#[derive(Clone)]
struct Plan1d {
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Plan1d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Plan1d({})", self.forward.len())
    }
}

impl Plan1d {
    fn new(n: usize) -> Self {
        PLANNER.with(|p| {
            let mut p = p.borrow_mut();
            Self {
                forward: p.plan_fft_forward(n),
                inverse: p.plan_fft_inverse(n),
            }
        })
    }

    fn run(&self, buf: &mut [Complex64], scratch: &mut Vec<Complex64>, inverse: bool) {
        let fft = if inverse { &self.inverse } else { &self.forward };
        scratch.resize(fft.get_inplace_scratch_len(), Complex64::new(0.0, 0.0));
        fft.process_with_scratch(buf, scratch);
    }
}

/// Row and column plans for `H x W` planes.
#[derive(Clone, Debug)]
struct Plan2d {
    h: usize,
    w: usize,
    rows: Plan1d,
    cols: Plan1d,
}

impl Plan2d {
    fn new(h: usize, w: usize) -> Self {
        Self {
            h,
            w,
            rows: Plan1d::new(w),
            cols: Plan1d::new(h),
        }
    }

    fn run(&self, plane: &mut [Complex64], inverse: bool) {
        let (h, w) = (self.h, self.w);
        let mut scratch = Vec::new();
        for r in 0..h {
            self.rows.run(&mut plane[r * w..(r + 1) * w], &mut scratch, inverse);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); h];
        for c in 0..w {
            for r in 0..h {
                column[r] = plane[r * w + c];
            }
            self.cols.run(&mut column, &mut scratch, inverse);
            for r in 0..h {
                plane[r * w + c] = column[r];
            }
        }
    }
}

fn plane_dims(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::shape(format!(
            "spectral operations need at least H x W dimensions, got {shape:?}"
        )));
    }
    let h = shape[shape.len() - 2];
    let w = shape[shape.len() - 1];
    Ok((shape[..shape.len() - 2].iter().product(), h, w))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Layout {
    /// Zero frequency at index `(0, 0)`.
    Natural,
    /// Zero frequency at `(H / 2, W / 2)`, as after an fftshift.
    Centered,
}

/// Complex spectrum of a real tensor, one `H x W` plane per leading index.
#[derive(Clone, Debug, PartialEq)]
pub struct Spectrum {
    shape: Vec<usize>,
    data: Vec<Complex64>,
    layout: Layout,
}

impl Spectrum {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>, layout: Layout) -> Result<Self> {
        plane_dims(&shape)?;
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape(format!(
                "spectrum shape {shape:?} does not match {} bins",
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            layout,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    /// Bin `(u, v)` of plane `p`, in this spectrum's own layout.
    pub fn at(&self, p: usize, u: usize, v: usize) -> Complex64 {
        let (_, h, w) = plane_dims(&self.shape).expect("validated at construction");
        self.data[(p * h + u) * w + v]
    }

    /// Sum of squared magnitudes over all bins.
    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Multiplies every plane bin-wise by a real mask laid out in the same
    /// (natural) order.
    pub fn apply_filter(&mut self, filter: &FreqFilter) -> Result<()> {
        let (_, h, w) = plane_dims(&self.shape)?;
        filter.expect_dims(h, w)?;
        if self.layout != Layout::Natural {
            return Err(Error::contract("filters apply to natural-layout spectra"));
        }
        for plane in self.data.chunks_mut(h * w) {
            for (z, &m) in plane.iter_mut().zip(&filter.values) {
                *z *= m;
            }
        }
        Ok(())
    }

    /// Reorders between natural and centered layouts.
    pub fn with_layout(&self, layout: Layout) -> Spectrum {
        if layout == self.layout {
            return self.clone();
        }
        let (_, h, w) = plane_dims(&self.shape).expect("validated at construction");
        // Natural -> centered moves bin u to (u + h/2) mod h; the reverse
        // uses the complementary offset so odd sizes round-trip.
        let (dh, dw) = match layout {
            Layout::Centered => (h / 2, w / 2),
            Layout::Natural => (h - h / 2, w - w / 2),
        };
        let mut data = vec![Complex64::new(0.0, 0.0); self.data.len()];
        for (src, dst) in self.data.chunks(h * w).zip(data.chunks_mut(h * w)) {
            for u in 0..h {
                for v in 0..w {
                    dst[((u + dh) % h) * w + (v + dw) % w] = src[u * w + v];
                }
            }
        }
        Spectrum {
            shape: self.shape.clone(),
            data,
            layout,
        }
    }
}

/// Unnormalized per-plane 2D DFT of a real tensor, natural layout.
pub fn dft2(x: &Tensor) -> Result<Spectrum> {
    let (planes, h, w) = plane_dims(x.shape())?;
    let plan = Plan2d::new(h, w);
    let mut data: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for p in 0..planes {
        plan.run(&mut data[p * h * w..(p + 1) * h * w], false);
    }
    Spectrum::new(x.shape().to_vec(), data, Layout::Natural)
}

/// Inverse transform with `1 / (H W)` normalization. The output must be
/// real: an imaginary residue of [`SYMMETRY_TOLERANCE`] or more is an error.
pub fn idft2(s: &Spectrum) -> Result<Tensor> {
    if s.layout != Layout::Natural {
        return Err(Error::contract("idft2 expects a natural-layout spectrum"));
    }
    let (planes, h, w) = plane_dims(&s.shape)?;
    let plan = Plan2d::new(h, w);
    let mut data = s.data.clone();
    for p in 0..planes {
        plan.run(&mut data[p * h * w..(p + 1) * h * w], true);
    }
    let norm = 1.0 / (h * w) as f64;
    let residue = data.iter().fold(0.0f64, |m, z| m.max(z.im.abs())) * norm;
    if residue >= SYMMETRY_TOLERANCE {
        return Err(Error::Symmetry { residue });
    }
    Tensor::new(s.shape.clone(), data.iter().map(|z| z.re * norm).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterKind {
    Gaussian,
    AllPass,
}

/// Real attenuation mask over an `H x W` natural-layout spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct FreqFilter {
    h: usize,
    w: usize,
    beta: f64,
    cutoff: f64,
    kind: FilterKind,
    values: Vec<f64>,
}

/// Largest distance from the zero frequency in an `h x w` spectrum.
pub fn max_radius(h: usize, w: usize) -> f64 {
    let (a, b) = (h as f64 / 2.0, w as f64 / 2.0);
    (a * a + b * b).sqrt()
}

/// Squared wrap-around distance of bin `(u, v)` from the zero frequency.
pub fn radial_distance_sq(h: usize, w: usize, u: usize, v: usize) -> f64 {
    let du = u.min(h - u) as f64;
    let dv = v.min(w - v) as f64;
    du * du + dv * dv
}

/// Builds a low-pass mask. For the Gaussian kind the value at `(u, v)` is
/// `exp(-(D / (2 D0))^2)` with `D0 = beta * max_radius(h, w)`.
pub fn make_filter(h: usize, w: usize, beta: f64, kind: FilterKind) -> Result<FreqFilter> {
    if h == 0 || w == 0 {
        return Err(Error::config(format!("filter extent must be positive, got {h}x{w}")));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::config(format!("cutoff factor beta must be positive, got {beta}")));
    }
    let cutoff = beta * max_radius(h, w);
    let values = match kind {
        FilterKind::AllPass => vec![1.0; h * w],
        FilterKind::Gaussian => {
            let denom = 4.0 * cutoff * cutoff;
            let mut values = Vec::with_capacity(h * w);
            for u in 0..h {
                for v in 0..w {
                    let d2 = radial_distance_sq(h, w, u, v);
                    // Far bins of very narrow filters underflow; the mask
                    // stays strictly positive.
                    values.push((-d2 / denom).exp().max(f64::MIN_POSITIVE));
                }
            }
            values
        }
    };
    Ok(FreqFilter {
        h,
        w,
        beta,
        cutoff,
        kind,
        values,
    })
}

impl FreqFilter {
    pub fn dims(&self) -> (usize, usize) {
        (self.h, self.w)
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Absolute cutoff radius `D0`.
    pub fn cutoff(&self) -> f64 {
        self.cutoff
    }

    pub fn kind(&self) -> FilterKind {
        self.kind
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn at(&self, u: usize, v: usize) -> f64 {
        self.values[u * self.w + v]
    }

    fn expect_dims(&self, h: usize, w: usize) -> Result<()> {
        if (self.h, self.w) != (h, w) {
            return Err(Error::shape(format!(
                "filter is {}x{}, feature planes are {h}x{w}",
                self.h, self.w
            )));
        }
        Ok(())
    }
}

/// Low band of every plane of `x`: `idft2(dft2(x) * filter)`.
pub fn lowpass(x: &Tensor, filter: &FreqFilter) -> Result<Tensor> {
    let (planes, h, w) = plane_dims(x.shape())?;
    filter.expect_dims(h, w)?;
    if filter.kind == FilterKind::AllPass {
        // Identity mask; skip the round trip.
        return Ok(x.clone());
    }
    let plan = Plan2d::new(h, w);
    let norm = 1.0 / (h * w) as f64;
    let mut out = vec![0.0; x.numel()];
    let mut buf = vec![Complex64::new(0.0, 0.0); h * w];
    let mut residue = 0.0f64;
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for (z, &v) in buf.iter_mut().zip(src) {
            *z = Complex64::new(v, 0.0);
        }
        plan.run(&mut buf, false);
        for (z, &m) in buf.iter_mut().zip(&filter.values) {
            *z *= m;
        }
        plan.run(&mut buf, true);
        for (o, z) in out[p * h * w..(p + 1) * h * w].iter_mut().zip(&buf) {
            *o = z.re * norm;
            residue = residue.max(z.im.abs() * norm);
        }
    }
    if residue >= SYMMETRY_TOLERANCE {
        return Err(Error::Symmetry { residue });
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Splits `x` into its low band and the residual high band `x - low`.
pub fn band_split(x: &Tensor, filter: &FreqFilter) -> Result<(Tensor, Tensor)> {
    let low = lowpass(x, filter)?;
    let high = x.sub(&low)?;
    Ok((low, high))
}

/// Frobenius norm of the high band of `x` under a Gaussian filter with
/// cutoff factor `beta`, taken over all channels jointly.
pub fn high_freq_norm(x: &Tensor, beta: f64) -> Result<f64> {
    let (_, h, w) = plane_dims(x.shape())?;
    let filter = make_filter(h, w, beta, FilterKind::Gaussian)?;
    let (_, high) = band_split(x, &filter)?;
    Ok(high.frobenius_norm())
}
