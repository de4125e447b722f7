//! Measurement instruments: weighted robust accuracy, layer-wise
//! high-frequency profiles, frequency-banded noise sweeps and statistics of
//! the emitted channel weights.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax_rows, Model, Network, TapKind, TappedNetwork};
use crate::spectral::{high_freq_norm, lowpass, make_filter, FilterKind};
use crate::tensor::Tensor;

/// `pi_nat * clean + pi_adv * robust`.
pub fn w_robust(clean: f64, robust: f64, pi_nat: f64, pi_adv: f64) -> Result<f64> {
    if !(pi_nat >= 0.0 && pi_adv >= 0.0) {
        return Err(Error::contract("weights must be non-negative"));
    }
    Ok(pi_nat * clean + pi_adv * robust)
}

/// A fraction as a percentage with two decimals, rounding halves up.
/// The value is first snapped to 1e-6 so that `0.70165` prints `70.17`
/// even though its binary value lies just below the half.
pub fn format_percent(v: f64) -> String {
    let micro = (v * 1e6).round() as i64;
    let hundredths = (micro + 50).div_euclid(100);
    let sign = if hundredths < 0 { "-" } else { "" };
    let a = hundredths.abs();
    format!("{sign}{}.{:02}", a / 100, a % 100)
}

/// Robust accuracy under one attack.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attack: String,
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub robust_acc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub model_id: String,
    pub config_hash: String,
    pub seed: u64,
    pub eval_beta: f64,
    pub samples: usize,
    pub clean_acc: f64,
    pub attacks: Vec<AttackResult>,
    pub pi_nat: f64,
    pub pi_adv: f64,
    /// Weighted robust accuracy against the first attack.
    pub w_robust: f64,
    pub w_robust_percent: String,
}

impl RobustnessReport {
    /// Builds the report; the weighted score uses the first attack.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        model_id: String,
        config_hash: String,
        seed: u64,
        eval_beta: f64,
        samples: usize,
        clean_acc: f64,
        attacks: Vec<AttackResult>,
        pi_nat: f64,
        pi_adv: f64,
    ) -> Result<Self> {
        let first = attacks
            .first()
            .ok_or_else(|| Error::contract("a robustness report needs at least one attack"))?;
        let w = w_robust(clean_acc, first.robust_acc, pi_nat, pi_adv)?;
        let r = Self {
            model_id,
            config_hash,
            seed,
            eval_beta,
            samples,
            clean_acc,
            attacks,
            pi_nat,
            pi_adv,
            w_robust: w,
            w_robust_percent: format_percent(w),
        };
        r.validate()?;
        Ok(r)
    }

    /// Checks ranges and that `w_robust` matches the stored accuracies.
    pub fn validate(&self) -> Result<()> {
        let accs = std::iter::once(self.clean_acc).chain(self.attacks.iter().map(|a| a.robust_acc));
        for a in accs {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::contract(format!("accuracy {a} outside [0, 1]")));
            }
        }
        let first = self
            .attacks
            .first()
            .ok_or_else(|| Error::contract("a robustness report needs at least one attack"))?;
        let w = w_robust(self.clean_acc, first.robust_acc, self.pi_nat, self.pi_adv)?;
        if (w - self.w_robust).abs() > 1e-12 {
            return Err(Error::contract("w_robust does not match the stored accuracies"));
        }
        Ok(())
    }
}

/// High-frequency norm of one tapped layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub layer: usize,
    pub stage: usize,
    pub kind: TapKind,
    pub is_stage_end: bool,
    pub hf_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FreqProfile {
    pub beta: f64,
    pub samples: usize,
    pub rows: Vec<ProfileRow>,
}

impl FreqProfile {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,stage,is_stage_end,hf_norm\n");
        for r in &self.rows {
            writeln!(s, "{},{},{},{}", r.layer, r.stage, r.is_stage_end as u8, r.hf_norm).unwrap();
        }
        s
    }

    /// `(stage, first-layer norm, last-layer norm)` for every stage.
    pub fn stage_endpoints(&self) -> Vec<(usize, f64, f64)> {
        let mut out: Vec<(usize, f64, f64)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some(last) if last.0 == r.stage => last.2 = r.hf_norm,
                _ => out.push((r.stage, r.hf_norm, r.hf_norm)),
            }
        }
        out
    }
}

/// High-frequency norm of every tapped layer output, computed per sample
/// and averaged over the batch.
pub fn layer_freq_profile(net: &impl TappedNetwork, x: &Tensor, beta: f64) -> Result<FreqProfile> {
    x.expect_rank(4, "profile batch")?;
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::contract("frequency profile of an empty batch"));
    }
    let taps = net.layer_taps(x)?;
    let mut rows = Vec::with_capacity(taps.len());
    for (layer, tap) in taps.iter().enumerate() {
        let mut total = 0.0;
        for s in 0..n {
            total += high_freq_norm(&tap.value.row(s)?, beta)?;
        }
        rows.push(ProfileRow {
            layer,
            stage: tap.stage,
            kind: tap.kind,
            is_stage_end: tap.is_stage_end,
            hf_norm: total / n as f64,
        });
    }
    Ok(FreqProfile { beta, samples: n, rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub beta: f64,
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSweepReport {
    pub epsilon: f64,
    pub draws: usize,
    pub seed: u64,
    /// Clean samples correctly classified; the rate denominator per draw.
    pub initially_correct: usize,
    /// Sorted by ascending `beta`.
    pub points: Vec<SweepPoint>,
}

impl NoiseSweepReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("beta,success_rate\n");
        for p in &self.points {
            writeln!(s, "{},{}", p.beta, p.success_rate).unwrap();
        }
        s
    }
}

/// Predictions in chunks of `chunk` samples.
pub fn predict_chunked(net: &impl Network, x: &Tensor, chunk: usize) -> Result<Vec<usize>> {
    let n = x.shape()[0];
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let end = (start + chunk.max(1)).min(n);
        let idx: Vec<usize> = (start..end).collect();
        out.extend(argmax_rows(&net.logits(&x.gather_rows(&idx)?)?));
        start = end;
    }
    Ok(out)
}

const SWEEP_CHUNK: usize = 100;

/// Low-passes `noise` with a Gaussian mask at `beta` and rescales every
/// sample to max-abs `epsilon`. All-zero samples stay zero.
pub fn banded_noise(noise: &Tensor, beta: f64, epsilon: f64) -> Result<Tensor> {
    noise.expect_rank(4, "noise")?;
    let (h, w) = (noise.shape()[2], noise.shape()[3]);
    let filter = make_filter(h, w, beta, FilterKind::Gaussian)?;
    let mut low = lowpass(noise, &filter)?;
    let per = noise.numel() / noise.shape()[0].max(1);
    for sample in low.data_mut().chunks_mut(per) {
        let m = sample.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        if m > 0.0 {
            for v in sample.iter_mut() {
                *v *= epsilon / m;
            }
        }
    }
    Ok(low)
}

/// Noise of draw `d`: uniform in `[-eps, eps]`, from its own RNG stream so
/// every cutoff in the sweep sees the same draw.
pub fn sweep_noise(shape: &[usize], epsilon: f64, seed: u64, draw: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(draw as u64);
    if epsilon == 0.0 {
        return Tensor::zeros(shape);
    }
    Tensor::from_fn(shape, |_| rng.random_range(-epsilon..=epsilon))
}

/// Success rate of low-passed random noise as a function of the cutoff.
/// For every draw and cutoff, noise is filtered, rescaled to max-abs `eps`
/// per sample, added to the clean inputs and clamped to `[0, 1]`. The rate
/// is the fraction of initially-correct samples that become misclassified,
/// pooled over draws.
pub fn freq_noise_sweep(
    net: &impl Network,
    x: &Tensor,
    labels: &[usize],
    betas: &[f64],
    epsilon: f64,
    draws: usize,
    seed: u64,
) -> Result<NoiseSweepReport> {
    if betas.is_empty() || draws == 0 {
        return Err(Error::config("a sweep needs at least one cutoff and one draw"));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::config(format!("epsilon {epsilon} outside [0, 1]")));
    }
    x.expect_rank(4, "sweep inputs")?;
    if labels.len() != x.shape()[0] {
        return Err(Error::shape("one label per sample expected"));
    }
    let mut sorted = betas.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::config("sweep cutoffs must be distinct"));
    }
    let clean = predict_chunked(net, x, SWEEP_CHUNK)?;
    let correct: Vec<usize> = (0..labels.len()).filter(|&i| clean[i] == labels[i]).collect();
    let yc: Vec<usize> = correct.iter().map(|&i| labels[i]).collect();
    let mut flips = vec![0usize; sorted.len()];
    if !correct.is_empty() {
        let xc = x.gather_rows(&correct)?;
        for d in 0..draws {
            let noise = sweep_noise(xc.shape(), epsilon, seed, d);
            for (bi, &beta) in sorted.iter().enumerate() {
                let delta = banded_noise(&noise, beta, epsilon)?;
                let noisy = xc.zip_map(&delta, |a, b| (a + b).clamp(0.0, 1.0))?;
                let pred = predict_chunked(net, &noisy, SWEEP_CHUNK)?;
                flips[bi] += pred.iter().zip(&yc).filter(|(p, y)| p != y).count();
            }
        }
    }
    let denom = (correct.len() * draws) as f64;
    Ok(NoiseSweepReport {
        epsilon,
        draws,
        seed,
        initially_correct: correct.len(),
        points: sorted
            .iter()
            .zip(&flips)
            .map(|(&beta, &f)| SweepPoint {
                beta,
                success_rate: if denom > 0.0 { f as f64 / denom } else { 0.0 },
            })
            .collect(),
    })
}

/// Statistics of the channel weights emitted in one stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStageStats {
    pub stage: usize,
    pub max: f64,
    pub min: f64,
    pub mean: f64,
    /// Population variance over channels and samples.
    pub var: f64,
    /// Per-channel variance across samples, averaged over channels.
    pub sample_var: f64,
    /// Largest per-channel variance across samples.
    pub sample_var_max: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub samples: usize,
    pub stages: Vec<AlphaStageStats>,
}

impl AlphaStats {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,max,min,mean,var,sample_var\n");
        for r in &self.stages {
            writeln!(s, "{},{},{},{},{},{}", r.stage, r.max, r.min, r.mean, r.var, r.sample_var).unwrap();
        }
        s
    }
}

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    (mean, v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / n)
}

/// Per-stage statistics of the weights emitted by learnable layers on `x`.
pub fn alpha_stats(model: &Model, x: &Tensor) -> Result<AlphaStats> {
    if !model.has_learnable_fpcm() {
        return Err(Error::contract("model has no learnable frequency preference layer"));
    }
    x.expect_rank(4, "alpha statistics batch")?;
    let n = x.shape()[0];
    if n == 0 {
        return Err(Error::contract("alpha statistics of an empty batch"));
    }
    let out = model.forward(x, false)?;
    let mut stages: Vec<(usize, Vec<f64>, Vec<f64>)> = Vec::new();
    for site in out.alphas.iter().filter(|a| a.learnable) {
        let vals = site.values.data();
        if let Some(bad) = vals.iter().find(|v| !(0.5..=1.0).contains(*v)) {
            return Err(Error::contract(format!("emitted weight {bad} outside [0.5, 1]")));
        }
        let c = site.values.shape()[1];
        let sample_vars: Vec<f64> = (0..c)
            .map(|ch| mean_var(&(0..n).map(|s| vals[s * c + ch]).collect::<Vec<_>>()).1)
            .collect();
        match stages.iter_mut().find(|(s, _, _)| *s == site.stage) {
            Some((_, all, sv)) => {
                all.extend_from_slice(vals);
                sv.extend(sample_vars);
            }
            None => stages.push((site.stage, vals.to_vec(), sample_vars)),
        }
    }
    stages.sort_by_key(|s| s.0);
    Ok(AlphaStats {
        samples: n,
        stages: stages
            .into_iter()
            .map(|(stage, all, sv)| {
                let (mean, var) = mean_var(&all);
                AlphaStageStats {
                    stage,
                    max: all.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    min: all.iter().copied().fold(f64::INFINITY, f64::min),
                    mean,
                    var,
                    sample_var: sv.iter().sum::<f64>() / sv.len() as f64,
                    sample_var_max: sv.iter().copied().fold(0.0, f64::max),
                }
            })
            .collect(),
    })
}
