//! Independent reference implementations used by the integration tests.
//! Nothing here calls into the transforms, kernels or tape it checks.
#![allow(dead_code)]

use std::f64::consts::PI;

use fpcm_core::model::{LayerTap, TapKind, TappedNetwork};
use fpcm_core::tape::{Tape, Var};
use fpcm_core::{Result, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut impl Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

/// Direct double-sum DFT of every trailing `h x w` plane:
/// `F(u, v) = sum_a sum_b x[a, b] exp(-2 pi i (u a / h + v b / w))`.
pub fn naive_dft2(x: &Tensor) -> Vec<Complex64> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (h * w);
    let mut out = Vec::with_capacity(x.numel());
    for p in 0..planes {
        let plane = &x.data()[p * h * w..(p + 1) * h * w];
        for u in 0..h {
            for v in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..h {
                    for b in 0..w {
                        let phase = -2.0 * PI * ((u * a) as f64 / h as f64 + (v * b) as f64 / w as f64);
                        acc += plane[a * w + b] * Complex64::from_polar(1.0, phase);
                    }
                }
                out.push(acc);
            }
        }
    }
    out
}

/// Direct inverse double sum with `1 / (h w)`, returning complex values.
pub fn naive_idft2(spec: &[Complex64], planes: usize, h: usize, w: usize) -> Vec<Complex64> {
    let mut out = Vec::with_capacity(spec.len());
    for p in 0..planes {
        let plane = &spec[p * h * w..(p + 1) * h * w];
        for a in 0..h {
            for b in 0..w {
                let mut acc = Complex64::new(0.0, 0.0);
                for u in 0..h {
                    for v in 0..w {
                        let phase = 2.0 * PI * ((u * a) as f64 / h as f64 + (v * b) as f64 / w as f64);
                        acc += plane[u * w + v] * Complex64::from_polar(1.0, phase);
                    }
                }
                out.push(acc / (h * w) as f64);
            }
        }
    }
    out
}

/// Distance of natural-order index `u` to the zero frequency, computed by
/// moving the index into a centred (shifted) layout first.
fn centred_offset(u: usize, n: usize) -> f64 {
    let shifted = (u + n / 2) % n;
    (shifted as f64 - (n / 2) as f64).abs()
}

/// `exp(-(D / (2 d0))^2)` evaluated at one bin.
pub fn scalar_gaussian(h: usize, w: usize, beta: f64, u: usize, v: usize) -> f64 {
    let du = centred_offset(u, h);
    let dv = centred_offset(v, w);
    let d = (du * du + dv * dv).sqrt();
    let d_max = ((h as f64 / 2.0).powi(2) + (w as f64 / 2.0).powi(2)).sqrt();
    let d0 = beta * d_max;
    (-(d / (2.0 * d0)).powi(2)).exp()
}

/// Low band of every plane via the naive transforms and the scalar filter.
pub fn naive_lowpass(x: &Tensor, beta: f64) -> Vec<f64> {
    let s = x.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let planes = x.numel() / (h * w);
    let mut spec = naive_dft2(x);
    for p in 0..planes {
        for u in 0..h {
            for v in 0..w {
                spec[p * h * w + u * w + v] *= scalar_gaussian(h, w, beta, u, v);
            }
        }
    }
    naive_idft2(&spec, planes, h, w).into_iter().map(|z| z.re).collect()
}

/// `C_out x C_in x k x k` cross-correlation of one `C_in x H x W` map.
pub fn naive_conv2d(x: &Tensor, w: &Tensor, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (ci, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (co, k) = (w.shape()[0], w.shape()[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for o in 0..co {
        for i in 0..ho {
            for j in 0..wo {
                let mut acc = 0.0;
                for c in 0..ci {
                    for a in 0..k {
                        for b in 0..k {
                            let r = (i * stride + a) as isize - pad as isize;
                            let q = (j * stride + b) as isize - pad as isize;
                            if r < 0 || q < 0 || r >= h as isize || q >= wd as isize {
                                continue;
                            }
                            acc += x.data()[(c * h + r as usize) * wd + q as usize]
                                * w.data()[((o * ci + c) * k + a) * k + b];
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = acc;
            }
        }
    }
    (vec![co, ho, wo], out)
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for l in 0..k {
                out[i * n + j] += a.data()[i * k + l] * b.data()[l * n + j];
            }
        }
    }
    out
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Clone, Copy)]
pub struct GradCheck {
    pub probes: usize,
    pub max_rel_err: f64,
}

/// Compares analytic gradients of the scalar `f(inputs)` against central
/// differences with step `h` at `probes` random (input, element) pairs.
/// Relative error is `|analytic - fd| / (|fd| + 1e-8)`.
pub fn gradcheck<F>(inputs: &[Tensor], probes: usize, h: f64, seed: u64, f: F) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor], grads: bool| -> Result<(f64, Vec<Option<Tensor>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals
            .iter()
            .map(|t| if grads { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let out = f(&mut tape, &vars)?;
        let value = tape.value(out).item()?;
        if !grads {
            return Ok((value, Vec::new()));
        }
        let mut g = tape.backward(out)?;
        Ok((value, vars.iter().map(|&v| g.take(v)).collect()))
    };
    let (_, analytic) = eval(inputs, true)?;
    let mut r = rng(seed);
    let mut worst = 0.0f64;
    for _ in 0..probes {
        let i = r.random_range(0..inputs.len());
        let j = r.random_range(0..inputs[i].numel());
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += h;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= h;
        let fd = (eval(&plus, false)?.0 - eval(&minus, false)?.0) / (2.0 * h);
        let a = analytic[i].as_ref().map_or(0.0, |g| g.data()[j]);
        worst = worst.max((a - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(GradCheck {
        probes,
        max_rel_err: worst,
    })
}

/// `sum(y * weights)` for a fixed random weight tensor, turning any output
/// into a scalar whose gradient reaches every element.
pub fn weighted_sum(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let mut r = rng(seed);
    let w = tape.constant(random_tensor(&shape, 0.5, 1.5, &mut r));
    let prod = tape.mul(y, w)?;
    tape.sum(prod)
}

/// A 2D sinusoid `amp cos(2 pi (k1 a / h + k2 b / w))` on one plane.
pub fn sinusoid(h: usize, w: usize, k1: usize, k2: usize, amp: f64) -> Tensor {
    Tensor::from_fn(&[1, h, w], |i| {
        let (a, b) = (i / w, i % w);
        amp * (2.0 * PI * (k1 as f64 * a as f64 / h as f64 + k2 as f64 * b as f64 / w as f64)).cos()
    })
}

/// Identity layer followed by a Laplacian sharpening layer.
pub struct TwoLayer;

pub fn sharpen(x: &Tensor) -> Tensor {
    let (n, c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    Tensor::from_fn(&[n, c, h, w], |i| {
        let (p, a, b) = (i / (h * w), (i / w) % h, i % w);
        let at = |da: isize, db: isize| {
            let r = (a as isize + da).rem_euclid(h as isize) as usize;
            let q = (b as isize + db).rem_euclid(w as isize) as usize;
            x.data()[p * h * w + r * w + q]
        };
        5.0 * at(0, 0) - at(-1, 0) - at(1, 0) - at(0, -1) - at(0, 1)
    })
}

impl TappedNetwork for TwoLayer {
    fn layer_taps(&self, x: &Tensor) -> Result<Vec<LayerTap>> {
        let tap = |index, value| LayerTap {
            index,
            stage: 0,
            kind: TapKind::Block,
            is_stage_end: index == 1,
            value,
        };
        Ok(vec![tap(0, x.clone()), tap(1, sharpen(x))])
    }
}
