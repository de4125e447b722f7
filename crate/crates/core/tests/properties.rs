//! Property tests for the algebraic and contract invariants.

mod common;

use common::*;
use fpcm_core::advtrain::{cutoff_schedule, pgd, AttackConfig};
use fpcm_core::analysis::w_robust;
use fpcm_core::data::{batches, synth_dataset, Split, SynthSpec};
use fpcm_core::fpcm::{alpha_weights, fpcm_forward, AlphaMode, AlphaSpec, CutoffState, FpcmParams};
use fpcm_core::model::{FpcmConfig, Model, ModelConfig, Placement, StageConfig};
use fpcm_core::spectral::{band_split, dft2, high_freq_norm, make_filter, FilterKind};
use fpcm_core::Tensor;
use proptest::prelude::*;

fn tensor_strategy(shape: Vec<usize>, bound: f64) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-bound..bound, n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn plane() -> impl Strategy<Value = Tensor> {
    (1usize..=9, 1usize..=9, 1usize..=3).prop_flat_map(|(h, w, c)| tensor_strategy(vec![c, h, w], 1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn dft_is_linear((x, y) in (1usize..=8, 1usize..=8).prop_flat_map(|(h, w)| (tensor_strategy(vec![h, w], 1.0), tensor_strategy(vec![h, w], 1.0))), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (fx, fy, fc) = (dft2(&x).unwrap(), dft2(&y).unwrap(), dft2(&combo).unwrap());
        for i in 0..fc.data().len() {
            prop_assert!((fc.data()[i] - (fx.data()[i] * a + fy.data()[i] * b)).norm() < 1e-6);
        }
    }

    #[test]
    fn parseval_holds(x in plane()) {
        let s = dft2(&x).unwrap();
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let lhs = x.sum_sq();
        let rhs = s.energy() / (h * w) as f64;
        prop_assert!((lhs - rhs).abs() <= 1e-5 * lhs.max(1e-12));
    }

    #[test]
    fn filtered_spectrum_inverts_to_real(x in plane(), beta in 0.01f64..1.0) {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let f = make_filter(h, w, beta, FilterKind::Gaussian).unwrap();
        let mut s = dft2(&x).unwrap();
        s.apply_filter(&f).unwrap();
        let back = naive_idft2(s.data(), x.shape()[0], h, w);
        prop_assert!(back.iter().all(|z| z.im.abs() < 1e-9));
        let (low, high) = band_split(&x, &f).unwrap();
        prop_assert!(low.add(&high).unwrap().max_abs_diff(&x).unwrap() < 1e-7);
    }

    #[test]
    fn high_band_shrinks_as_cutoff_grows(x in plane(), b1 in 0.01f64..1.0, b2 in 0.01f64..1.0) {
        let (lo, hi) = if b1 < b2 { (b1, b2) } else { (b2, b1) };
        prop_assert!(high_freq_norm(&x, lo).unwrap() >= high_freq_norm(&x, hi).unwrap() - 1e-12);
    }

    #[test]
    fn filter_values_in_unit_interval(h in 1usize..=16, w in 1usize..=16, beta in 1e-3f64..1.0) {
        let f = make_filter(h, w, beta, FilterKind::Gaussian).unwrap();
        prop_assert_eq!(f.at(0, 0), 1.0);
        prop_assert!(f.values().iter().all(|&v| v > 0.0 && v <= 1.0));
    }

    #[test]
    fn fixed_alpha_is_linear((x, y) in (2usize..=6).prop_flat_map(|s| (tensor_strategy(vec![2, s, s], 1.0), tensor_strategy(vec![2, s, s], 1.0))), alpha in 0.5f64..=1.0, beta in 0.05f64..1.0, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let p = FpcmParams::new(AlphaMode::Fixed(alpha), 2).unwrap();
        let c = CutoffState::new(beta).unwrap();
        let combo = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let lhs = fpcm_forward(&combo, &p, &c).unwrap();
        let rhs = fpcm_forward(&x, &p, &c).unwrap().scale(a).add(&fpcm_forward(&y, &p, &c).unwrap().scale(b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn fixed_alpha_never_amplifies(x in (2usize..=8).prop_flat_map(|s| tensor_strategy(vec![3, s, s], 5.0)), alpha in 0.5f64..=1.0, beta in 0.05f64..1.0) {
        let p = FpcmParams::new(AlphaMode::Fixed(alpha), 3).unwrap();
        let y = fpcm_forward(&x, &p, &CutoffState::new(beta).unwrap()).unwrap();
        prop_assert!(y.frobenius_norm() <= x.frobenius_norm() + 1e-5);
        if alpha > 0.5 {
            prop_assert!(high_freq_norm(&y, beta).unwrap() <= high_freq_norm(&x, beta).unwrap() + 1e-5);
        }
    }

    #[test]
    fn learnable_alpha_stays_in_range(x in tensor_strategy(vec![6, 3, 3], 1.0), scale in prop::sample::select(vec![1.0, 1e3, 1e6, -1e6]), seed in 0u64..1000, mlp in any::<bool>()) {
        let mut r = rng(seed);
        let spec = if mlp { AlphaSpec::Mlp { hidden: 4 } } else { AlphaSpec::Conv { kernel: 3 } };
        let p = FpcmParams::new(spec.init(6, &mut r).unwrap(), 6).unwrap();
        let a = alpha_weights(&x.scale(scale), &p).unwrap();
        prop_assert!(a.data().iter().all(|&v| (0.5..=1.0).contains(&v)));
    }

    #[test]
    fn schedule_is_monotone(total in 1usize..200) {
        let mut prev = f64::INFINITY;
        for t in 0..=total {
            let b = cutoff_schedule(t, total).unwrap();
            prop_assert!(b <= prev && (0.125..=0.5).contains(&b));
            prev = b;
        }
        prop_assert_eq!(cutoff_schedule(0, total).unwrap(), 0.5);
        prop_assert_eq!(cutoff_schedule(total, total).unwrap(), 0.125);
    }

    #[test]
    fn w_robust_linear_and_symmetric(c in 0.0f64..1.0, r in 0.0f64..1.0, k in 0.0f64..1.0, pn in 0.0f64..1.0, pa in 0.0f64..1.0) {
        let base = w_robust(c, r, pn, pa).unwrap();
        prop_assert!((base - w_robust(r, c, pa, pn).unwrap()).abs() < 1e-12);
        let scaled = w_robust(k * c, r, pn, pa).unwrap();
        prop_assert!((scaled - (base - pn * c + pn * k * c)).abs() < 1e-12);
    }

    #[test]
    fn batches_partition(n in 2usize..=6, bs in 1usize..=13, seed in proptest::option::of(0u64..100)) {
        let ds = synth_dataset(&SynthSpec::new(2, n, 4, 0.1, 1), Split::Train).unwrap();
        let mut seen: Vec<usize> = batches(&ds, bs, seed).unwrap().flat_map(|b| b.indices).collect();
        seen.sort();
        prop_assert_eq!(seen, (0..2 * n).collect::<Vec<_>>());
        prop_assert!(ds.images().data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn pgd_respects_both_boxes(seed in 0u64..1000, eps in 0.01f64..0.2, steps in 1usize..4) {
        let cfg = ModelConfig {
            input: [3, 8, 8],
            classes: 3,
            stages: vec![StageConfig { channels: 4, blocks: 1 }],
            placement: Placement::PerStageEnd,
            fpcm: FpcmConfig::default(),
            ..ModelConfig::default()
        };
        let m = Model::build(&cfg, seed).unwrap();
        let mut r = rng(seed);
        let x = random_tensor(&[2, 3, 8, 8], 0.0, 1.0, &mut r);
        let attack = AttackConfig { epsilon: eps, step_size: eps / 2.0, steps, random_start: true };
        let adv = pgd(&m, &x, &[0, 2], &attack, &mut r).unwrap();
        prop_assert!(adv.max_abs_diff(&x).unwrap() <= eps + 1e-12);
        prop_assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
