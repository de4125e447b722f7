//! Frequency preference control: per-channel re-weighting of the low and
//! high spectral bands of a feature map.
//!
//! For a feature `x` with low band `x_lo` (Gaussian low-pass at the current
//! cutoff) the layer returns `alpha * x_lo + (1 - alpha) * (x - x_lo)`, with
//! one `alpha` per channel. Learnable variants derive `alpha` from the
//! spatially pooled input and squash it into `[0.5, 1]`.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spectral::{make_filter, FilterKind, FreqFilter};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// How channel weights are produced, without the weights themselves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AlphaSpec {
    Fixed { alpha: f64 },
    /// Pool, then a bias-free circular conv across channels.
    Conv { kernel: usize },
    /// Pool, then `C -> hidden -> C` bias-free affine maps with a ReLU.
    Mlp { hidden: usize },
}

impl AlphaSpec {
    pub fn validate(&self) -> Result<()> {
        match *self {
            AlphaSpec::Fixed { alpha } if !(0.0..=1.0).contains(&alpha) => Err(Error::config(
                format!("fixed alpha must lie in [0, 1], got {alpha}"),
            )),
            AlphaSpec::Conv { kernel } if kernel % 2 == 0 => Err(Error::config(format!(
                "channel conv kernel must be odd, got {kernel}"
            ))),
            AlphaSpec::Mlp { hidden: 0 } => Err(Error::config("mlp hidden width must be positive")),
            _ => Ok(()),
        }
    }

    pub fn is_learnable(&self) -> bool {
        !matches!(self, AlphaSpec::Fixed { .. })
    }

    /// Learnable scalar count for a layer over `channels` channels.
    pub fn param_count(&self, channels: usize) -> usize {
        match *self {
            AlphaSpec::Fixed { .. } => 0,
            AlphaSpec::Conv { kernel } => kernel,
            AlphaSpec::Mlp { hidden } => 2 * channels * hidden,
        }
    }

    /// Draws initial weights: uniform in `+-1/sqrt(fan_in)`, rounded to `f32`.
    pub fn init(&self, channels: usize, rng: &mut impl Rng) -> Result<AlphaMode> {
        self.validate()?;
        let mut uniform = |shape: &[usize], fan_in: usize| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            let mut t = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
            t.round_to_f32();
            t
        };
        Ok(match *self {
            AlphaSpec::Fixed { alpha } => AlphaMode::Fixed(alpha),
            AlphaSpec::Conv { kernel } => AlphaMode::Conv {
                weights: uniform(&[kernel], kernel),
            },
            AlphaSpec::Mlp { hidden } => AlphaMode::Mlp {
                w1: uniform(&[channels, hidden], channels),
                w2: uniform(&[hidden, channels], hidden),
            },
        })
    }
}

/// Channel weighting with its weights.
#[derive(Clone, Debug, PartialEq)]
pub enum AlphaMode {
    Fixed(f64),
    Conv { weights: Tensor },
    Mlp { w1: Tensor, w2: Tensor },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "beta", rename_all = "snake_case")]
pub enum BetaMode {
    Fixed(f64),
    /// Follows the training cutoff schedule.
    Scheduled,
}

/// Current cutoff factor of a layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutoffState {
    current_beta: f64,
}

impl CutoffState {
    pub fn new(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta <= 1.0) {
            return Err(Error::config(format!("cutoff factor must lie in (0, 1], got {beta}")));
        }
        Ok(Self { current_beta: beta })
    }

    pub fn beta(&self) -> f64 {
        self.current_beta
    }
}

/// Parameters of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct FpcmParams {
    pub mode: AlphaMode,
    pub beta_mode: BetaMode,
    pub channels: usize,
    pub filter: FilterKind,
    /// Treat `alpha` as a constant with respect to the input when
    /// differentiating. Diagnostic only.
    pub detached: bool,
}

impl FpcmParams {
    pub fn new(mode: AlphaMode, channels: usize) -> Result<Self> {
        let p = Self {
            mode,
            beta_mode: BetaMode::Scheduled,
            channels,
            filter: FilterKind::Gaussian,
            detached: false,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        match &self.mode {
            AlphaMode::Fixed(a) if !(0.0..=1.0).contains(a) => {
                Err(Error::config(format!("fixed alpha must lie in [0, 1], got {a}")))
            }
            AlphaMode::Conv { weights } if weights.rank() != 1 || weights.numel() % 2 == 0 => Err(
                Error::config(format!("conv weights must be an odd-length vector, got {:?}", weights.shape())),
            ),
            AlphaMode::Mlp { w1, w2 } => {
                let ok = w1.rank() == 2
                    && w2.rank() == 2
                    && w1.shape()[0] == self.channels
                    && w2.shape() == [w1.shape()[1], self.channels];
                if ok {
                    Ok(())
                } else {
                    Err(Error::config(format!(
                        "mlp weights {:?}, {:?} do not fit {} channels",
                        w1.shape(),
                        w2.shape(),
                        self.channels
                    )))
                }
            }
            _ => Ok(()),
        }
    }

    pub fn param_count(&self) -> usize {
        fpcm_param_count(self)
    }

    fn on_tape(&self, tape: &mut Tape) -> AlphaVars {
        match &self.mode {
            AlphaMode::Fixed(a) => AlphaVars::Fixed(*a),
            AlphaMode::Conv { weights } => AlphaVars::Conv(tape.param(weights.clone())),
            AlphaMode::Mlp { w1, w2 } => {
                AlphaVars::Mlp(tape.param(w1.clone()), tape.param(w2.clone()))
            }
        }
    }
}

/// Exact number of learnable scalars.
pub fn fpcm_param_count(p: &FpcmParams) -> usize {
    match &p.mode {
        AlphaMode::Fixed(_) => 0,
        AlphaMode::Conv { weights } => weights.numel(),
        AlphaMode::Mlp { w1, w2 } => w1.numel() + w2.numel(),
    }
}

/// Channel-weight source with weights already recorded on a tape.
#[derive(Clone, Copy, Debug)]
pub enum AlphaVars {
    Fixed(f64),
    Conv(Var),
    Mlp(Var, Var),
}

/// Records the `N x C` channel weights for an `N x C x H x W` input.
pub fn alpha_on_tape(tape: &mut Tape, x: Var, alpha: AlphaVars, detached: bool) -> Result<Var> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 4 {
        return Err(Error::shape(format!("expected N x C x H x W, got {shape:?}")));
    }
    let (n, c) = (shape[0], shape[1]);
    let pre = match alpha {
        AlphaVars::Fixed(a) => return Ok(tape.constant(Tensor::full(&[n, c], a))),
        AlphaVars::Conv(w) => {
            let src = if detached { tape.detach(x) } else { x };
            let pooled = tape.global_avg_pool(src)?;
            tape.channel_conv1d(pooled, w)?
        }
        AlphaVars::Mlp(w1, w2) => {
            let src = if detached { tape.detach(x) } else { x };
            let w1_shape = tape.value(w1).shape().to_vec();
            if w1_shape[0] != c {
                return Err(Error::shape(format!(
                    "mlp expects {} channels, input has {c}",
                    w1_shape[0]
                )));
            }
            let pooled = tape.global_avg_pool(src)?;
            let hidden = tape.matmul(pooled, w1)?;
            let hidden = tape.relu(hidden)?;
            tape.matmul(hidden, w2)?
        }
    };
    let s = tape.sigmoid(pre)?;
    tape.affine(s, 0.5, 0.5)
}

/// Records the full layer on a tape. Returns the output and the `N x C`
/// channel weights that were applied.
pub fn fpcm_on_tape(
    tape: &mut Tape,
    x: Var,
    alpha: AlphaVars,
    filter: Arc<FreqFilter>,
    detached: bool,
) -> Result<(Var, Var)> {
    let a = alpha_on_tape(tape, x, alpha, detached)?;
    let low = tape.lowpass(x, filter)?;
    let high = tape.sub(x, low)?;
    let one_minus = tape.affine(a, -1.0, 1.0)?;
    let lo_w = tape.scale_channels(low, a)?;
    let hi_w = tape.scale_channels(high, one_minus)?;
    let out = tape.add(lo_w, hi_w)?;
    Ok((out, a))
}

/// Accepts `C x H x W` or `N x C x H x W`; returns the 4D view and whether
/// the input was a single map.
fn as_batch(x: &Tensor, p: &FpcmParams) -> Result<(Tensor, bool)> {
    let (t, single) = match x.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(x.shape());
            (x.reshape(&shape)?, true)
        }
        4 => (x.clone(), false),
        _ => {
            return Err(Error::shape(format!(
                "feature map must be C x H x W or N x C x H x W, got {:?}",
                x.shape()
            )))
        }
    };
    if t.shape()[1] != p.channels {
        return Err(Error::shape(format!(
            "layer configured for {} channels, feature has {}",
            p.channels,
            t.shape()[1]
        )));
    }
    Ok((t, single))
}

/// Channel weights: a length-`C` tensor for a single map, `N x C` for a batch.
pub fn alpha_weights(x: &Tensor, p: &FpcmParams) -> Result<Tensor> {
    let (xb, single) = as_batch(x, p)?;
    let mut tape = Tape::new();
    let xv = tape.constant(xb);
    let vars = p.on_tape(&mut tape);
    let a = alpha_on_tape(&mut tape, xv, vars, p.detached)?;
    let out = tape.value(a).clone();
    if single {
        out.reshape(&[p.channels])
    } else {
        Ok(out)
    }
}

/// The layer filter for a given spatial size and cutoff.
pub fn layer_filter(h: usize, w: usize, p: &FpcmParams, c: &CutoffState) -> Result<FreqFilter> {
    make_filter(h, w, c.beta(), p.filter)
}

/// Applies the layer to a single map or a batch.
pub fn fpcm_forward(x: &Tensor, p: &FpcmParams, c: &CutoffState) -> Result<Tensor> {
    let (xb, single) = as_batch(x, p)?;
    let (h, w) = (xb.shape()[2], xb.shape()[3]);
    let filter = Arc::new(layer_filter(h, w, p, c)?);
    let mut tape = Tape::new();
    let xv = tape.constant(xb);
    let vars = p.on_tape(&mut tape);
    let (out, _) = fpcm_on_tape(&mut tape, xv, vars, filter, p.detached)?;
    let out = tape.value(out).clone();
    if single {
        out.reshape(x.shape())
    } else {
        Ok(out)
    }
}
