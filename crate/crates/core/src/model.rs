//! Multi-stage residual CNN with frequency preference layers at
//! configurable block boundaries.

use std::sync::Arc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpcm::{fpcm_on_tape, AlphaMode, AlphaSpec, AlphaVars, BetaMode, CutoffState, FpcmParams};
use crate::spectral::{make_filter, FilterKind};
use crate::tape::{BatchStats, Tape, Var};
use crate::tensor::Tensor;

/// Cutoff factor used outside training.
pub const EVAL_BETA: f64 = 0.125;

const BACKBONE_STREAM: u64 = 0;
const FPCM_STREAM: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub channels: usize,
    pub blocks: usize,
}

/// Where frequency preference layers go. Slot `s` means "applied to the
/// input of global block `s`"; slot `total_blocks` is after the last block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "slots", rename_all = "snake_case")]
pub enum Placement {
    None,
    /// Immediately before the final block of each stage.
    PerStageEnd,
    /// Immediately after the final block of each stage.
    AfterStageEnd,
    Custom(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FpcmConfig {
    pub alpha: AlphaSpec,
    pub beta: BetaMode,
    pub filter: FilterKind,
    pub detached: bool,
}

impl Default for FpcmConfig {
    fn default() -> Self {
        Self {
            alpha: AlphaSpec::Conv { kernel: 3 },
            beta: BetaMode::Scheduled,
            filter: FilterKind::Gaussian,
            detached: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// `C x H x W` of one input image.
    pub input: [usize; 3],
    pub classes: usize,
    pub stages: Vec<StageConfig>,
    pub placement: Placement,
    pub fpcm: FpcmConfig,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input: [3, 32, 32],
            classes: 10,
            stages: [16, 32, 64]
                .iter()
                .map(|&channels| StageConfig { channels, blocks: 2 })
                .collect(),
            placement: Placement::PerStageEnd,
            fpcm: FpcmConfig::default(),
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn total_blocks(&self) -> usize {
        self.stages.iter().map(|s| s.blocks).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::config("model needs at least one stage"));
        }
        if let Some(i) = self.stages.iter().position(|s| s.blocks == 0 || s.channels == 0) {
            return Err(Error::config(format!("stage {i} needs at least one block and channel")));
        }
        if self.classes < 2 {
            return Err(Error::config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.input.contains(&0) {
            return Err(Error::config(format!("input shape {:?} has a zero extent", self.input)));
        }
        if !(self.bn_eps > 0.0) || !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::config("batch-norm eps must be positive and momentum in [0, 1]"));
        }
        if self.placement != Placement::None {
            self.fpcm.alpha.validate()?;
            if let BetaMode::Fixed(b) = self.fpcm.beta {
                CutoffState::new(b)?;
            }
        }
        self.slots().map(|_| ())
    }

    /// Resolved `(slot, stage)` pairs, sorted by slot.
    pub fn slots(&self) -> Result<Vec<(usize, usize)>> {
        let total = self.total_blocks();
        let mut starts = Vec::with_capacity(self.stages.len());
        let mut acc = 0;
        for s in &self.stages {
            starts.push(acc);
            acc += s.blocks;
        }
        let stage_of_block = |b: usize| starts.iter().rposition(|&st| st <= b).unwrap_or(0);
        let out = match &self.placement {
            Placement::None => Vec::new(),
            Placement::PerStageEnd => self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| (starts[i] + s.blocks - 1, i))
                .collect(),
            Placement::AfterStageEnd => self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| (starts[i] + s.blocks, i))
                .collect(),
            Placement::Custom(slots) => {
                let mut sorted = slots.clone();
                sorted.sort_unstable();
                sorted.dedup();
                if sorted.len() != slots.len() {
                    return Err(Error::config(format!("duplicate placement slots in {slots:?}")));
                }
                if let Some(&bad) = sorted.iter().find(|&&s| s > total) {
                    return Err(Error::config(format!(
                        "placement slot {bad} out of range 0..={total}"
                    )));
                }
                sorted
                    .into_iter()
                    .map(|s| (s, if s < total { stage_of_block(s) } else { self.stages.len() - 1 }))
                    .collect()
            }
        };
        Ok(out)
    }
}

/// A named tensor owned by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug)]
struct BnRef {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ConvBn {
    weight: usize,
    bn: BnRef,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Block {
    conv1: ConvBn,
    conv2: ConvBn,
    shortcut: Option<ConvBn>,
    stage: usize,
    is_stage_end: bool,
}

#[derive(Clone, Debug)]
enum SiteAlpha {
    Fixed(f64),
    Conv(usize),
    Mlp(usize, usize),
}

#[derive(Clone, Debug)]
struct Site {
    slot: usize,
    stage: usize,
    channels: usize,
    alpha: SiteAlpha,
    beta_mode: BetaMode,
    cutoff: CutoffState,
    filter: FilterKind,
    detached: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BnMode {
    /// Normalize with the statistics of the current batch.
    Train,
    /// Normalize with running statistics.
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TapKind {
    Stem,
    Block,
    Fpcm,
}

/// Captured output of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub index: usize,
    pub stage: usize,
    pub kind: TapKind,
    pub is_stage_end: bool,
    pub value: Tensor,
}

/// Channel weights emitted by one frequency preference layer.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteAlphas {
    pub site: usize,
    pub stage: usize,
    pub learnable: bool,
    /// `N x C`.
    pub values: Tensor,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `N x classes`.
    pub logits: Tensor,
    /// Stem and block outputs, in network order.
    pub taps: Vec<LayerTap>,
    /// Outputs of the frequency preference layers.
    pub fpcm_taps: Vec<LayerTap>,
    pub alphas: Vec<SiteAlphas>,
}

/// Vars produced by recording a forward pass.
#[derive(Debug)]
pub struct Recorded {
    pub logits: Var,
    /// One var per model parameter, in [`Model::params`] order.
    pub params: Vec<Var>,
    /// Batch statistics per batch-norm layer (training mode only), in
    /// buffer order.
    pub batch_stats: Vec<BatchStats>,
    taps: Vec<(TapKind, usize, bool, Var)>,
    alphas: Vec<(usize, Var)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RecordOptions {
    pub bn: BnMode,
    /// Record parameters as differentiable leaves.
    pub param_grads: bool,
}

/// Residual CNN with optional frequency preference layers.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    params: Vec<Param>,
    buffers: Vec<Param>,
    stem: ConvBn,
    blocks: Vec<Block>,
    sites: Vec<Site>,
    head_w: usize,
    head_b: usize,
}

struct Builder<'a> {
    params: Vec<Param>,
    buffers: Vec<Param>,
    rng: &'a mut ChaCha8Rng,
}

impl Builder<'_> {
    fn param(&mut self, name: String, mut value: Tensor) -> usize {
        value.round_to_f32();
        self.params.push(Param { name, value });
        self.params.len() - 1
    }

    fn buffer(&mut self, name: String, value: Tensor) -> usize {
        self.buffers.push(Param { name, value });
        self.buffers.len() - 1
    }

    fn conv_bn(&mut self, name: &str, c_in: usize, c_out: usize, k: usize, stride: usize) -> ConvBn {
        let fan_in = (c_in * k * k) as f64;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
        let rng = &mut *self.rng;
        let w = Tensor::from_fn(&[c_out, c_in, k, k], |_| normal.sample(rng));
        let weight = self.param(format!("{name}.weight"), w);
        let bn = BnRef {
            gamma: self.param(format!("{name}.bn.gamma"), Tensor::ones(&[c_out])),
            beta: self.param(format!("{name}.bn.beta"), Tensor::zeros(&[c_out])),
            mean: self.buffer(format!("{name}.bn.running_mean"), Tensor::zeros(&[c_out])),
            var: self.buffer(format!("{name}.bn.running_var"), Tensor::ones(&[c_out])),
        };
        ConvBn {
            weight,
            bn,
            stride,
            pad: k / 2,
        }
    }
}

fn seeded(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Builds a model with deterministic initialization. Backbone and
/// frequency-layer weights come from independent random streams, so the
/// backbone is identical for every placement.
pub fn build_model(cfg: &ModelConfig, seed: u64) -> Result<Model> {
    Model::build(cfg, seed)
}

impl Model {
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = seeded(seed, BACKBONE_STREAM);
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: &mut rng,
        };
        let c0 = cfg.stages[0].channels;
        let stem = b.conv_bn("stem.conv", cfg.input[0], c0, 3, 1);
        let mut blocks = Vec::new();
        let mut c_in = c0;
        for (si, stage) in cfg.stages.iter().enumerate() {
            for bi in 0..stage.blocks {
                let stride = if si > 0 && bi == 0 { 2 } else { 1 };
                let name = format!("stages.{si}.blocks.{bi}");
                let conv1 = b.conv_bn(&format!("{name}.conv1"), c_in, stage.channels, 3, stride);
                let conv2 = b.conv_bn(&format!("{name}.conv2"), stage.channels, stage.channels, 3, 1);
                let shortcut = (stride != 1 || c_in != stage.channels)
                    .then(|| b.conv_bn(&format!("{name}.shortcut"), c_in, stage.channels, 1, stride));
                blocks.push(Block {
                    conv1,
                    conv2,
                    shortcut,
                    stage: si,
                    is_stage_end: bi + 1 == stage.blocks,
                });
                c_in = stage.channels;
            }
        }
        let bound = 1.0 / (c_in as f64).sqrt();
        let hw = Tensor::from_fn(&[c_in, cfg.classes], |_| b.rng.random_range(-bound..bound));
        let hb = Tensor::from_fn(&[cfg.classes], |_| b.rng.random_range(-bound..bound));
        let head_w = b.param("head.weight".into(), hw);
        let head_b = b.param("head.bias".into(), hb);

        let mut fpcm_rng = seeded(seed, FPCM_STREAM);
        let mut sites = Vec::new();
        let block_out: Vec<usize> = cfg
            .stages
            .iter()
            .flat_map(|s| std::iter::repeat_n(s.channels, s.blocks))
            .collect();
        for (i, (slot, stage)) in cfg.slots()?.into_iter().enumerate() {
            let channels = if slot == 0 { c0 } else { block_out[slot - 1] };
            let alpha = match cfg.fpcm.alpha.init(channels, &mut fpcm_rng)? {
                AlphaMode::Fixed(a) => SiteAlpha::Fixed(a),
                AlphaMode::Conv { weights } => SiteAlpha::Conv(b.param(format!("fpcm.{i}.conv.weight"), weights)),
                AlphaMode::Mlp { w1, w2 } => SiteAlpha::Mlp(
                    b.param(format!("fpcm.{i}.mlp.w1"), w1),
                    b.param(format!("fpcm.{i}.mlp.w2"), w2),
                ),
            };
            let beta = match cfg.fpcm.beta {
                BetaMode::Fixed(v) => v,
                BetaMode::Scheduled => EVAL_BETA,
            };
            sites.push(Site {
                slot,
                stage,
                channels,
                alpha,
                beta_mode: cfg.fpcm.beta,
                cutoff: CutoffState::new(beta)?,
                filter: cfg.fpcm.filter,
                detached: cfg.fpcm.detached,
            });
        }
        let Builder { params, buffers, .. } = b;
        Ok(Self {
            cfg: cfg.clone(),
            params,
            buffers,
            stem,
            blocks,
            sites,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Batch-norm running statistics.
    pub fn buffers(&self) -> &[Param] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [Param] {
        &mut self.buffers
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn fpcm_count(&self) -> usize {
        self.sites.len()
    }

    pub fn fpcm_param_count(&self) -> usize {
        self.sites
            .iter()
            .map(|s| match s.alpha {
                SiteAlpha::Fixed(_) => 0,
                SiteAlpha::Conv(w) => self.params[w].value.numel(),
                SiteAlpha::Mlp(a, b) => self.params[a].value.numel() + self.params[b].value.numel(),
            })
            .sum()
    }

    pub fn has_learnable_fpcm(&self) -> bool {
        self.sites.iter().any(|s| !matches!(s.alpha, SiteAlpha::Fixed(_)))
    }

    /// `(slot, stage)` of every frequency preference layer.
    pub fn fpcm_sites(&self) -> Vec<(usize, usize)> {
        self.sites.iter().map(|s| (s.slot, s.stage)).collect()
    }

    /// Standalone parameters of layer `i`, with weights copied out.
    pub fn fpcm_params(&self, i: usize) -> Option<(FpcmParams, CutoffState)> {
        let s = self.sites.get(i)?;
        let mode = match s.alpha {
            SiteAlpha::Fixed(a) => AlphaMode::Fixed(a),
            SiteAlpha::Conv(w) => AlphaMode::Conv {
                weights: self.params[w].value.clone(),
            },
            SiteAlpha::Mlp(a, b) => AlphaMode::Mlp {
                w1: self.params[a].value.clone(),
                w2: self.params[b].value.clone(),
            },
        };
        Some((
            FpcmParams {
                mode,
                beta_mode: s.beta_mode,
                channels: s.channels,
                filter: s.filter,
                detached: s.detached,
            },
            s.cutoff,
        ))
    }

    /// Sets the cutoff of every scheduled layer; fixed-cutoff layers keep theirs.
    pub fn set_scheduled_beta(&mut self, beta: f64) -> Result<()> {
        let state = CutoffState::new(beta)?;
        for s in &mut self.sites {
            if s.beta_mode == BetaMode::Scheduled {
                s.cutoff = state;
            }
        }
        Ok(())
    }

    /// Current cutoff of the scheduled layers, if any.
    pub fn scheduled_beta(&self) -> Option<f64> {
        self.sites
            .iter()
            .find(|s| s.beta_mode == BetaMode::Scheduled)
            .map(|s| s.cutoff.beta())
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s.len() != 4 || s[1..] != self.cfg.input {
            return Err(Error::shape(format!(
                "model expects N x {:?}, got {s:?}",
                self.cfg.input
            )));
        }
        Ok(())
    }

    fn conv_bn(
        &self,
        tape: &mut Tape,
        x: Var,
        l: &ConvBn,
        pv: &[Var],
        opts: RecordOptions,
        stats: &mut Vec<(usize, BatchStats)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, pv[l.weight], l.stride, l.pad)?;
        let (g, b) = (pv[l.bn.gamma], pv[l.bn.beta]);
        match opts.bn {
            BnMode::Train => {
                let (out, st) = tape.batch_norm_train(y, g, b, self.cfg.bn_eps)?;
                stats.push((l.bn.mean, st));
                Ok(out)
            }
            BnMode::Eval => tape.batch_norm_eval(
                y,
                g,
                b,
                self.buffers[l.bn.mean].value.data(),
                self.buffers[l.bn.var].value.data(),
                self.cfg.bn_eps,
            ),
        }
    }

    fn apply_sites(
        &self,
        tape: &mut Tape,
        mut h: Var,
        slot: usize,
        pv: &[Var],
        rec_taps: &mut Vec<(TapKind, usize, bool, Var)>,
        rec_alphas: &mut Vec<(usize, Var)>,
    ) -> Result<Var> {
        for (i, site) in self.sites.iter().enumerate().filter(|(_, s)| s.slot == slot) {
            let shape = tape.value(h).shape().to_vec();
            let filter = Arc::new(make_filter(shape[2], shape[3], site.cutoff.beta(), site.filter)?);
            let alpha = match site.alpha {
                SiteAlpha::Fixed(a) => AlphaVars::Fixed(a),
                SiteAlpha::Conv(w) => AlphaVars::Conv(pv[w]),
                SiteAlpha::Mlp(a, b) => AlphaVars::Mlp(pv[a], pv[b]),
            };
            let (out, a) = fpcm_on_tape(tape, h, alpha, filter, site.detached)?;
            rec_taps.push((TapKind::Fpcm, site.stage, false, out));
            rec_alphas.push((i, a));
            h = out;
        }
        Ok(h)
    }

    /// Records a forward pass of batch `x` on `tape`.
    pub fn record(&self, tape: &mut Tape, x: Var, opts: RecordOptions) -> Result<Recorded> {
        self.check_input(tape.value(x))?;
        let pv: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if opts.param_grads {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        let mut stats = Vec::new();
        let mut taps = Vec::new();
        let mut alphas = Vec::new();

        let h = self.conv_bn(tape, x, &self.stem, &pv, opts, &mut stats)?;
        let mut h = tape.relu(h)?;
        taps.push((TapKind::Stem, 0, false, h));
        for (bi, block) in self.blocks.iter().enumerate() {
            h = self.apply_sites(tape, h, bi, &pv, &mut taps, &mut alphas)?;
            let y = self.conv_bn(tape, h, &block.conv1, &pv, opts, &mut stats)?;
            let y = tape.relu(y)?;
            let y = self.conv_bn(tape, y, &block.conv2, &pv, opts, &mut stats)?;
            let sc = match &block.shortcut {
                Some(l) => self.conv_bn(tape, h, l, &pv, opts, &mut stats)?,
                None => h,
            };
            let y = tape.add(y, sc)?;
            h = tape.relu(y)?;
            taps.push((TapKind::Block, block.stage, block.is_stage_end, h));
        }
        h = self.apply_sites(tape, h, self.blocks.len(), &pv, &mut taps, &mut alphas)?;
        let pooled = tape.global_avg_pool(h)?;
        let logits = tape.matmul(pooled, pv[self.head_w])?;
        let logits = tape.channel_bias(logits, pv[self.head_b])?;

        stats.sort_by_key(|(i, _)| *i);
        Ok(Recorded {
            logits,
            params: pv,
            batch_stats: stats.into_iter().map(|(_, s)| s).collect(),
            taps,
            alphas,
        })
    }

    /// Runs a forward pass in the given batch-norm mode, without gradients.
    pub fn forward_mode(&self, x: &Tensor, bn: BnMode, taps: bool) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let rec = self.record(
            &mut tape,
            xv,
            RecordOptions {
                bn,
                param_grads: false,
            },
        )?;
        let mut out = ForwardOutput {
            logits: tape.value(rec.logits).clone(),
            taps: Vec::new(),
            fpcm_taps: Vec::new(),
            alphas: rec
                .alphas
                .iter()
                .map(|&(site, v)| SiteAlphas {
                    site,
                    stage: self.sites[site].stage,
                    learnable: !matches!(self.sites[site].alpha, SiteAlpha::Fixed(_)),
                    values: tape.value(v).clone(),
                })
                .collect(),
        };
        if taps {
            let mut index = 0;
            for &(kind, stage, is_stage_end, v) in &rec.taps {
                let tap = LayerTap {
                    index: 0,
                    stage,
                    kind,
                    is_stage_end,
                    value: tape.value(v).clone(),
                };
                if kind == TapKind::Fpcm {
                    out.fpcm_taps.push(LayerTap {
                        index: out.fpcm_taps.len(),
                        ..tap
                    });
                } else {
                    out.taps.push(LayerTap { index, ..tap });
                    index += 1;
                }
            }
        }
        Ok(out)
    }

    /// Inference forward pass (running batch-norm statistics).
    pub fn forward(&self, x: &Tensor, taps: bool) -> Result<ForwardOutput> {
        self.forward_mode(x, BnMode::Eval, taps)
    }

    /// Folds batch statistics into the running estimates. `stats` is in
    /// batch-norm layer order, as returned by [`Model::record`].
    pub fn update_running_stats(&mut self, stats: &[BatchStats]) -> Result<()> {
        let layers: Vec<&BnRef> = std::iter::once(&self.stem.bn)
            .chain(self.blocks.iter().flat_map(|b| {
                [Some(&b.conv1.bn), Some(&b.conv2.bn), b.shortcut.as_ref().map(|s| &s.bn)]
                    .into_iter()
                    .flatten()
            }))
            .collect();
        let mut layers: Vec<(usize, usize)> = layers.iter().map(|l| (l.mean, l.var)).collect();
        layers.sort_unstable();
        if layers.len() != stats.len() {
            return Err(Error::contract(format!(
                "{} batch-norm layers, {} statistic sets",
                layers.len(),
                stats.len()
            )));
        }
        let m = self.cfg.bn_momentum;
        for ((mi, vi), st) in layers.into_iter().zip(stats) {
            for (buf, batch) in [(mi, &st.mean), (vi, &st.var)] {
                let t = &mut self.buffers[buf].value;
                for (r, b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (1.0 - m) * *r + m * b;
                }
                t.round_to_f32();
            }
        }
        Ok(())
    }

    /// Replaces parameter and buffer values, in [`Model::params`] and
    /// [`Model::buffers`] order. Shapes must match.
    pub fn load_state(&mut self, params: Vec<Tensor>, buffers: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() || buffers.len() != self.buffers.len() {
            return Err(Error::config("parameter layout does not match the model"));
        }
        for (dst, src) in self.params.iter_mut().chain(self.buffers.iter_mut()).zip(params.into_iter().chain(buffers)) {
            if dst.value.shape() != src.shape() {
                return Err(Error::config(format!(
                    "{}: stored shape {:?}, model expects {:?}",
                    dst.name,
                    src.shape(),
                    dst.value.shape()
                )));
            }
            dst.value = src;
        }
        Ok(())
    }

    pub fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.forward(x, false)?.logits))
    }
}

/// Index of the largest entry of every row of an `N x K` tensor (first on ties).
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
                .0
        })
        .collect()
}

/// A classifier whose logits can be recorded on a tape, so attacks can take
/// input gradients.
pub trait Network {
    fn num_classes(&self) -> usize;

    /// Records logits for the batch `x`; weights are recorded as constants.
    fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var>;

    /// Whether input gradients can be taken through this network.
    fn differentiable(&self) -> bool {
        true
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let l = self.logits_on_tape(&mut tape, xv)?;
        Ok(tape.value(l).clone())
    }

    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

/// A model evaluated with a fixed batch-norm mode. In training mode the
/// running statistics are not updated.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub model: &'a Model,
    pub bn: BnMode,
}

impl Model {
    pub fn view(&self, bn: BnMode) -> ModelView<'_> {
        ModelView { model: self, bn }
    }
}

impl Network for ModelView<'_> {
    fn num_classes(&self) -> usize {
        self.model.cfg.classes
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self
            .model
            .record(
                tape,
                x,
                RecordOptions {
                    bn: self.bn,
                    param_grads: false,
                },
            )?
            .logits)
    }
}

impl Network for Model {
    fn num_classes(&self) -> usize {
        self.cfg.classes
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.view(BnMode::Eval).logits_on_tape(tape, x)
    }
}

/// A network that exposes per-layer outputs for frequency profiling.
pub trait TappedNetwork {
    /// Layer outputs for the batch `x`, in network order.
    fn layer_taps(&self, x: &Tensor) -> Result<Vec<LayerTap>>;
}

impl TappedNetwork for Model {
    fn layer_taps(&self, x: &Tensor) -> Result<Vec<LayerTap>> {
        Ok(self.forward(x, true)?.taps)
    }
}

impl Recorded {
    /// Vars of the recorded layer outputs with their metadata.
    pub fn tap_vars(&self) -> impl Iterator<Item = (TapKind, usize, bool, Var)> + '_ {
        self.taps.iter().copied()
    }
}
