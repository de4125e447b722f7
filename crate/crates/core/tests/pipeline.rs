//! Attacks, training, analysis, data loading and checkpoints.

mod common;

use std::collections::BTreeMap;
use std::fs;

use common::*;
use fpcm_core::advtrain::{
    cutoff_schedule, evaluate, fgsm, input_gradient, pgd, train, trades_loss, trades_loss_at, AttackConfig, Objective,
    TrainConfig,
};
use fpcm_core::analysis::{
    alpha_stats, freq_noise_sweep, layer_freq_profile, sweep_noise, w_robust, format_percent,
};
use fpcm_core::data::{
    balanced_indices, batches, decode_cifar_records, load_cifar10, synth_dataset, Dataset, Split, SynthSpec,
    CIFAR_RECORD_LEN,
};
use fpcm_core::fpcm::AlphaSpec;
use fpcm_core::model::{
    argmax_rows, FpcmConfig, Model, ModelConfig, Network, Placement, StageConfig,
};
use fpcm_core::persist::{self, CheckpointMeta};
use fpcm_core::spectral::dft2;
use fpcm_core::tape::{Tape, Var};
use fpcm_core::{Error, Result, Tensor};
use rand::Rng;

/// Two-class linear classifier on single-channel `k x k` images: logits are
/// `(0, <w, x>)`.
struct Linear {
    w: Tensor,
}

impl Linear {
    fn new(w: Vec<f64>) -> Self {
        let k = (w.len() as f64).sqrt() as usize;
        let mut full = vec![0.0; k * k];
        full.extend(w);
        Self {
            w: Tensor::new(vec![2, 1, k, k], full).unwrap(),
        }
    }

    fn score(&self, x: &[f64]) -> f64 {
        let k2 = x.len();
        self.w.data()[k2..].iter().zip(x).map(|(a, b)| a * b).sum()
    }
}

impl Network for Linear {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.constant(self.w.clone());
        let y = tape.conv2d(x, w, 1, 0)?;
        tape.global_avg_pool(y)
    }
}

/// Model whose logits ignore the input.
struct Constant;

impl Network for Constant {
    fn num_classes(&self) -> usize {
        2
    }

    fn logits_on_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let zero = tape.affine(x, 0.0, 0.0)?;
        let pooled = tape.global_avg_pool(zero)?;
        let w = tape.constant(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let l = tape.matmul(pooled, w)?;
        let n = tape.value(x).shape()[0];
        let bias = tape.constant(Tensor::from_fn(&[n, 2], |i| if i % 2 == 0 { 1.0 } else { -1.0 }));
        tape.add(l, bias)
    }
}

fn ce_single(net: &Linear, x: &[f64], label: usize) -> f64 {
    let s = net.score(x);
    let logits = [0.0, s];
    let m = s.max(0.0);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    lse - logits[label]
}

fn linear_fixture() -> (Linear, Tensor) {
    let w = vec![0.8, -1.2, 0.3, -0.5, 2.0, -0.1, 0.7, 1.1, -0.9];
    let mut r = rng(20);
    (Linear::new(w), random_tensor(&[2, 1, 3, 3], 0.3, 0.7, &mut r))
}

#[test]
fn fgsm_on_logistic_model_steps_along_weight_signs() {
    let (net, x) = linear_fixture();
    let adv = fgsm(&net, &x, &[0, 1], 0.1).unwrap();
    let w = &net.w.data()[9..];
    for i in 0..2 {
        let dir = if i == 0 { 1.0 } else { -1.0 };
        for j in 0..9 {
            let delta = adv.data()[i * 9 + j] - x.data()[i * 9 + j];
            assert!((delta - dir * 0.1 * w[j].signum()).abs() < 1e-12);
        }
    }
    assert_eq!(fgsm(&net, &x, &[0, 1], 0.0).unwrap(), x);
}

#[test]
fn fgsm_constant_model_leaves_input() {
    let mut r = rng(21);
    let x = random_tensor(&[3, 1, 3, 3], 0.0, 1.0, &mut r);
    assert_eq!(fgsm(&Constant, &x, &[0, 1, 0], 0.05).unwrap(), x);
}

#[test]
fn input_gradient_matches_closed_form() {
    let (net, x) = linear_fixture();
    let (loss, g) = input_gradient(&net, &x, &[0, 1]).unwrap();
    let w = &net.w.data()[9..];
    let mut expect = 0.0;
    for i in 0..2 {
        let xi = &x.data()[i * 9..(i + 1) * 9];
        expect += ce_single(&net, xi, i) / 2.0;
        let p1 = 1.0 / (1.0 + (-net.score(xi)).exp());
        let coef = if i == 0 { p1 } else { p1 - 1.0 } / 2.0;
        for j in 0..9 {
            assert!((g.data()[i * 9 + j] - coef * w[j]).abs() < 1e-10);
        }
    }
    assert!((loss - expect).abs() < 1e-10);
}

#[test]
fn one_step_pgd_without_start_is_fgsm() {
    let (net, x) = linear_fixture();
    let cfg = AttackConfig {
        epsilon: 0.1,
        step_size: 0.1,
        steps: 1,
        random_start: false,
    };
    let a = pgd(&net, &x, &[0, 1], &cfg, &mut rng(0)).unwrap();
    assert_eq!(a, fgsm(&net, &x, &[0, 1], 0.1).unwrap());
}

#[test]
fn pgd_stays_in_ball_and_ascends() {
    let (net, x) = linear_fixture();
    let mut prev = -1.0;
    for steps in [1, 3, 10] {
        let cfg = AttackConfig {
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            steps,
            random_start: false,
        };
        let a = pgd(&net, &x, &[0, 1], &cfg, &mut rng(1)).unwrap();
        assert!(a.max_abs_diff(&x).unwrap() <= 8.0 / 255.0 + 1e-12);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let loss = input_gradient(&net, &a, &[0, 1]).unwrap().0;
        assert!(loss >= prev - 1e-12);
        prev = loss;
    }
    assert!(prev > input_gradient(&net, &x, &[0, 1]).unwrap().0);
    let bad = AttackConfig {
        step_size: 0.1,
        ..AttackConfig::pgd(3)
    };
    assert!(matches!(pgd(&net, &x, &[0, 1], &bad, &mut rng(1)), Err(Error::Config(_))));
}

#[test]
fn trades_reduces_to_cross_entropy() {
    let (net, x) = linear_fixture();
    let ce = input_gradient(&net, &x, &[0, 1]).unwrap().0;
    let t = trades_loss(&net, &x, &[0, 1], 0.0, &AttackConfig::pgd(2), &mut rng(2)).unwrap();
    assert!((t - ce).abs() < 1e-12);
    assert!((trades_loss_at(&net, &x, &x, &[0, 1], 6.0).unwrap() - ce).abs() < 1e-12);
}

#[test]
fn trades_kl_term_matches_hand_value() {
    // Logits (0, 0) versus (0, ln 9): KL(0.5, 0.5 || 0.1, 0.9) = 0.5 ln(5/9) + 0.5 ln 5 = 0.5108...
    let net = Linear::new(vec![1.0]);
    let x = Tensor::new(vec![1, 1, 1, 1], vec![0.0]).unwrap();
    let xa = Tensor::new(vec![1, 1, 1, 1], vec![9f64.ln()]).unwrap();
    let ce = 2f64.ln();
    let kl = 0.5 * (0.5f64 / 0.1).ln() + 0.5 * (0.5f64 / 0.9).ln();
    let t = trades_loss_at(&net, &x, &xa, &[0], 2.0).unwrap();
    assert!((t - (ce + 2.0 * kl)).abs() < 1e-12);
}

fn tiny_model_cfg(placement: Placement, alpha: AlphaSpec) -> ModelConfig {
    ModelConfig {
        input: [3, 8, 8],
        classes: 4,
        stages: vec![StageConfig { channels: 4, blocks: 2 }, StageConfig { channels: 8, blocks: 2 }],
        placement,
        fpcm: FpcmConfig {
            alpha,
            ..FpcmConfig::default()
        },
        ..ModelConfig::default()
    }
}

fn tiny_data(split: Split) -> Dataset {
    synth_dataset(&SynthSpec::new(4, 8, 8, 0.05, 3), split).unwrap()
}

fn quick_train(objective: Objective, epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 8,
        lr,
        objective,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn schedule_endpoints() {
    assert_eq!(cutoff_schedule(0, 10).unwrap(), 0.5);
    assert_eq!(cutoff_schedule(10, 10).unwrap(), 0.125);
    assert!((cutoff_schedule(5, 10).unwrap() - 0.3125).abs() < 1e-15);
    assert!(cutoff_schedule(11, 10).is_err());
}

#[test]
fn zero_lr_leaves_params_and_log_has_one_line_per_epoch() {
    let data = tiny_data(Split::Train);
    let cfg = tiny_model_cfg(Placement::PerStageEnd, AlphaSpec::Conv { kernel: 3 });
    let mut m = Model::build(&cfg, 1).unwrap();
    let before = m.params().to_vec();
    let rep = train(&mut m, &data, &quick_train(Objective::PgdAt, 1, 0.0), &AttackConfig::pgd(2), None).unwrap();
    assert_eq!(m.params(), &before[..]);
    assert_eq!(rep.epochs.len(), 1);
    assert_eq!(m.scheduled_beta(), Some(0.125));
}

#[test]
fn seeded_training_is_reproducible() {
    let data = tiny_data(Split::Train);
    let cfg = tiny_model_cfg(Placement::PerStageEnd, AlphaSpec::Conv { kernel: 3 });
    let run = || {
        let mut m = Model::build(&cfg, 2).unwrap();
        let tc = quick_train(Objective::Trades { beta_trades: 6.0 }, 2, 0.05);
        let rep = train(&mut m, &data, &tc, &AttackConfig::pgd(2), None).unwrap();
        (rep, m)
    };
    let ((ra, ma), (rb, mb)) = (run(), run());
    assert_eq!(ra.epochs.len(), 2);
    assert_eq!(ra.step_losses, rb.step_losses);
    assert_eq!(ma.params(), mb.params());
    assert_eq!(ra.epochs[0].beta, 0.5);
    assert_eq!(ra.epochs[1].beta, 0.3125);
}

#[test]
fn divergence_is_a_training_error() {
    let data = tiny_data(Split::Train);
    let mut m = Model::build(&tiny_model_cfg(Placement::None, AlphaSpec::Conv { kernel: 3 }), 3).unwrap();
    let tc = TrainConfig {
        momentum: 0.0,
        ..quick_train(Objective::Natural, 3, 1e30)
    };
    let err = train(&mut m, &data, &tc, &AttackConfig::pgd(1), None).unwrap_err();
    assert!(matches!(err, Error::Training { .. }), "{err}");
}

#[test]
fn natural_training_learns_synthetic_classes() {
    let data = tiny_data(Split::Train);
    let mut m = Model::build(&tiny_model_cfg(Placement::None, AlphaSpec::Conv { kernel: 3 }), 4).unwrap();
    train(&mut m, &data, &quick_train(Objective::Natural, 8, 0.05), &AttackConfig::pgd(1), None).unwrap();
    let res = evaluate(&m, &tiny_data(Split::Test), 16, None, &mut rng(0)).unwrap();
    assert!(res.clean_acc > 0.5, "{res:?}");
}

#[test]
fn robust_never_exceeds_clean() {
    let m = Model::build(&tiny_model_cfg(Placement::PerStageEnd, AlphaSpec::Conv { kernel: 3 }), 6).unwrap();
    let res = evaluate(&m, &tiny_data(Split::Test), 16, Some(&AttackConfig::pgd(3)), &mut rng(1)).unwrap();
    assert!(res.robust_acc.unwrap() <= res.clean_acc);
}

#[test]
fn weighted_robustness_examples() {
    assert!((w_robust(0.8, 0.4, 0.5, 0.5).unwrap() - 0.6).abs() < 1e-12);
    assert!((w_robust(0.8, 0.4, 1.0, 0.0).unwrap() - 0.8).abs() < 1e-12);
    assert!((w_robust(0.8, 0.4, 0.0, 1.0).unwrap() - 0.4).abs() < 1e-12);
    assert!(w_robust(0.8, 0.4, -0.1, 0.6).is_err());
    assert_eq!(format_percent(0.70165), "70.17");
}

#[test]
fn frequency_profile_matches_per_sample_oracle() {
    let mut r = rng(30);
    let x = random_tensor(&[3, 2, 8, 8], 0.0, 1.0, &mut r);
    let prof = layer_freq_profile(&TwoLayer, &x, 0.25).unwrap();
    assert_eq!(prof.rows.len(), 2);
    for (row, layer) in prof.rows.iter().zip([x.clone(), sharpen(&x)]) {
        let mut total = 0.0;
        for i in 0..3 {
            let s = layer.gather_rows(&[i]).unwrap();
            let low = naive_lowpass(&s, 0.25);
            total += s.data().iter().zip(&low).map(|(a, l)| (a - l).powi(2)).sum::<f64>().sqrt();
        }
        assert!((row.hf_norm - total / 3.0).abs() < 1e-4);
    }
    assert!(prof.rows[1].hf_norm > prof.rows[0].hf_norm);
    assert_eq!(prof.to_csv().lines().count(), 3);
}

#[test]
fn noise_sweep_matches_brute_force_replay() {
    let (net, _) = linear_fixture();
    let mut r = rng(31);
    let x = random_tensor(&[12, 1, 3, 3], 0.0, 1.0, &mut r);
    let labels: Vec<usize> = (0..12).map(|i| i % 2).collect();
    let betas = [0.5, 0.125, 1.0];
    let (eps, draws, seed) = (0.3, 3, 9);
    let rep = freq_noise_sweep(&net, &x, &labels, &betas, eps, draws, seed).unwrap();
    assert_eq!(rep.points.iter().map(|p| p.beta).collect::<Vec<_>>(), vec![0.125, 0.5, 1.0]);

    let correct: Vec<usize> = (0..12).filter(|&i| (net.score(x.row(i).unwrap().data()) > 0.0) as usize == labels[i]).collect();
    assert_eq!(rep.initially_correct, correct.len());
    for p in &rep.points {
        let mut flips = 0;
        for d in 0..draws {
            let noise = sweep_noise(&[correct.len(), 1, 3, 3], eps, seed, d);
            for (k, &i) in correct.iter().enumerate() {
                let low = naive_lowpass(&noise.gather_rows(&[k]).unwrap(), p.beta);
                let m = low.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let xi: Vec<f64> = x.row(i).unwrap().data().iter().zip(&low).map(|(a, l)| (a + l * eps / m).clamp(0.0, 1.0)).collect();
                flips += usize::from((net.score(&xi) > 0.0) as usize != labels[i]);
            }
        }
        assert_eq!(p.success_rate, flips as f64 / (correct.len() * draws) as f64);
    }

    let zero = freq_noise_sweep(&net, &x, &labels, &betas, 0.0, 2, seed).unwrap();
    assert!(zero.points.iter().all(|p| p.success_rate == 0.0));
    assert!(freq_noise_sweep(&net, &x, &labels, &[0.5, 0.5], eps, 1, seed).is_err());

    let none = freq_noise_sweep(&Constant, &x, &[1; 12], &betas, eps, 2, seed).unwrap();
    assert_eq!(none.initially_correct, 0);
    assert!(none.points.iter().all(|p| p.success_rate == 0.0));
}

#[test]
fn alpha_stats_at_zero_weights() {
    let x = tiny_data(Split::Test).head(6).unwrap().images;
    let fixed = Model::build(&tiny_model_cfg(Placement::PerStageEnd, AlphaSpec::Fixed { alpha: 0.7 }), 1).unwrap();
    assert!(matches!(alpha_stats(&fixed, &x), Err(Error::Contract(_))));
    let mut m = Model::build(&tiny_model_cfg(Placement::PerStageEnd, AlphaSpec::Conv { kernel: 3 }), 1).unwrap();
    for p in m.params_mut().iter_mut().filter(|p| p.name.starts_with("fpcm")) {
        p.value = Tensor::zeros(p.value.shape());
    }
    let st = alpha_stats(&m, &x).unwrap();
    assert_eq!(st.stages.len(), 2);
    for s in &st.stages {
        assert_eq!((s.mean, s.max, s.min, s.var, s.sample_var), (0.75, 0.75, 0.75, 0.0, 0.0));
    }
    assert_eq!(st.to_csv().lines().next().unwrap(), "stage,max,min,mean,var,sample_var");
}

fn fake_record(label: u8, seed: u64) -> Vec<u8> {
    let mut r = rng(seed);
    let mut rec = vec![label];
    rec.extend((0..CIFAR_RECORD_LEN - 1).map(|_| r.random::<u8>()));
    rec
}

#[test]
fn cifar_reader_decodes_bytes() {
    let bytes: Vec<u8> = [fake_record(3, 1), fake_record(7, 2)].concat();
    let (labels, px) = decode_cifar_records(&bytes).unwrap();
    assert_eq!(labels, vec![3, 7]);
    // Channel-major: byte 1 + c*1024 + row*32 + col.
    let (c, row, col) = (2, 5, 17);
    let off = CIFAR_RECORD_LEN - 1;
    assert_eq!(px[off + c * 1024 + row * 32 + col], bytes[CIFAR_RECORD_LEN + 1 + c * 1024 + row * 32 + col] as f64 / 255.0);
    assert!(matches!(decode_cifar_records(&bytes[..100]), Err(Error::Format(_))));
    assert!(matches!(decode_cifar_records(&fake_record(10, 3)), Err(Error::Format(_))));
}

#[test]
fn cifar_loader_balances_classes() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(load_cifar10(dir.path(), Split::Test, None), Err(Error::Io { .. })));
    for f in 1..=5u64 {
        let bytes: Vec<u8> = (0..30u64).flat_map(|i| fake_record(((i * 7 + f) % 10) as u8, f * 100 + i)).collect();
        fs::write(dir.path().join(format!("data_batch_{f}.bin")), bytes).unwrap();
    }
    let ds = load_cifar10(dir.path(), Split::Train, Some(100)).unwrap();
    assert_eq!(ds.len(), 100);
    let mut counts = BTreeMap::new();
    for &y in ds.labels() {
        *counts.entry(y).or_insert(0) += 1;
    }
    assert!(counts.values().all(|&c| c == 10));
    assert_eq!(balanced_indices(&[0, 0, 1, 0, 1], 2, 3), vec![0, 1, 2]);
}

#[test]
fn synthetic_classes_peak_at_their_wavenumber() {
    let spec = SynthSpec::new(4, 3, 16, 0.02, 7);
    let ds = synth_dataset(&spec, Split::Train).unwrap();
    for i in 0..ds.len() {
        let s = dft2(&ds.images().gather_rows(&[i]).unwrap()).unwrap();
        let plane = &s.data()[..256];
        let best = (1..256).max_by(|&a, &b| plane[a].norm().total_cmp(&plane[b].norm())).unwrap();
        let (u, v) = (best / 16, best % 16);
        let (ku, kv) = spec.wavenumbers[ds.labels()[i]];
        let fold = |a: usize| a.min(16 - a);
        assert_eq!((fold(u), fold(v)), (ku, kv));
    }
}

#[test]
fn noiseless_synthetic_samples_differ_only_in_phase() {
    let spec = SynthSpec::new(3, 2, 8, 0.0, 8);
    let ds = synth_dataset(&spec, Split::Test).unwrap();
    for i in 0..ds.len() {
        let img = ds.images().gather_rows(&[i]).unwrap();
        let (ku, kv) = spec.wavenumbers[ds.labels()[i]];
        let spec_plane = naive_dft2(&img.gather_rows(&[0]).unwrap());
        let phase = spec_plane[ku * 8 + kv].arg();
        for c in 0..3 {
            let amp = 0.3 * (1.0 - 0.25 * c as f64 / 3.0);
            for a in 0..8 {
                for b in 0..8 {
                    let arg = 2.0 * std::f64::consts::PI * (ku * a + kv * b) as f64 / 8.0;
                    let expect = 0.5 + amp * (arg + phase).cos();
                    assert!((img.data()[(c * 8 + a) * 8 + b] - expect).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn batches_partition_the_dataset() {
    let ds = tiny_data(Split::Train);
    for seed in [None, Some(4)] {
        let mut seen: Vec<usize> = batches(&ds, 5, seed).unwrap().flat_map(|b| b.indices).collect();
        seen.sort();
        assert_eq!(seen, (0..ds.len()).collect::<Vec<_>>());
    }
}

#[test]
fn checkpoint_round_trip_and_faults() {
    let data = tiny_data(Split::Train);
    let cfg = tiny_model_cfg(Placement::PerStageEnd, AlphaSpec::Mlp { hidden: 4 });
    let mut m = Model::build(&cfg, 7).unwrap();
    let rep = train(&mut m, &data, &quick_train(Objective::Natural, 1, 0.05), &AttackConfig::pgd(1), None).unwrap();
    let meta = CheckpointMeta {
        epoch: 1,
        beta: m.scheduled_beta(),
        seed: 7,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.fpcm");
    persist::save(&m, &meta, Some(&rep.optimizer), &path).unwrap();
    let ck = persist::load(&path).unwrap();
    assert_eq!(ck.model.params(), m.params());
    assert_eq!(ck.model.buffers(), m.buffers());
    assert_eq!(ck.meta, meta);
    assert_eq!(ck.optimizer.unwrap(), rep.optimizer);
    let x = data.head(4).unwrap().images;
    assert_eq!(argmax_rows(&ck.model.logits(&x).unwrap()), m.predict(&x).unwrap());
    assert_eq!(ck.model.logits(&x).unwrap(), m.logits(&x).unwrap());

    let bytes = fs::read(&path).unwrap();
    let mut r = rng(40);
    for _ in 0..50 {
        let mut bad = bytes.clone();
        let i = r.random_range(16..bytes.len());
        bad[i] ^= 1 << r.random_range(0..8);
        assert!(persist::decode(&bad).is_err(), "flip at {i} accepted");
    }
    let mut bad = bytes.clone();
    bad[8] = 9;
    assert!(matches!(persist::decode(&bad), Err(Error::Version(9))));
    assert!(matches!(persist::decode(&bytes[..bytes.len() - 1]), Err(Error::Checksum { .. })));

    let mut other = Model::build(&tiny_model_cfg(Placement::None, AlphaSpec::Conv { kernel: 3 }), 7).unwrap();
    assert!(matches!(persist::load_into(&mut other, &path), Err(Error::Config(_))));
}
