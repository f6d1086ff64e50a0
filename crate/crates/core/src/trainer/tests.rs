use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::image::Image;
use crate::phantom::{make_phantom, simulate_scan, PhantomSpec, ScanSpec};
use crate::projector::{GridSpec, SinogramSpec};

fn model() -> Arc<SystemModel> {
    Arc::new(SystemModel::build(GridSpec::new(16, 1.0).unwrap(), SinogramSpec::new(12, 24, 1.0).unwrap()).unwrap())
}

fn cfg(phases: usize) -> TrainConfig {
    TrainConfig {
        learning_rate: 1e-2,
        batch_size: 2,
        epochs: 2,
        lda: LdaConfig { phases, ..LdaConfig::default() },
        ..TrainConfig::default()
    }
}

fn sample(m: &SystemModel, seed: u64) -> TrainSample {
    let x = make_phantom(&PhantomSpec::with_seed(seed), m.grid()).unwrap();
    let (y, b) = simulate_scan(&x, m, &ScanSpec { total_counts: 5e4, randoms_fraction: 0.2, seed }).unwrap();
    TrainSample { y, b }
}

fn samples(m: &SystemModel, seeds: std::ops::Range<u64>) -> Vec<TrainSample> {
    seeds.map(|s| sample(m, s)).collect()
}

fn symmetrize(theta: &RegularizerParams) -> RegularizerParams {
    let mut out = theta.clone();
    for kern in &mut out.kernels {
        let k = kern.shape()[3];
        let src = kern.data().to_vec();
        for (slice, dst) in src.chunks(k * k).zip(kern.data_mut().chunks_mut(k * k)) {
            for r in 0..k {
                for c in 0..k {
                    let (mut rr, mut cc, mut acc) = (r, c, 0.0);
                    for _ in 0..4 {
                        acc += slice[rr * k + cc];
                        (rr, cc) = (cc, k - 1 - rr);
                    }
                    dst[r * k + c] = acc / 4.0;
                }
            }
        }
    }
    out
}

proptest! {
    #[test]
    fn dual_loss_is_the_weighted_sum(li in 0.0..1e6f64, lm in 0.0..1e6f64, lambda in 0.0..10.0f64) {
        let r = LossReport::new(li, lm, lambda);
        prop_assert_eq!(r.l_dual, li + lambda * lm);
        prop_assert!(r.is_finite());
    }
}

#[test]
fn loss_mode_weights() {
    assert_eq!(LossMode::Image.weights(0.3), (1.0, 0.0));
    assert_eq!(LossMode::Measure.weights(0.3), (0.0, 1.0));
    assert_eq!(LossMode::Dual.weights(0.3), (1.0, 0.3));
}

#[test]
fn config_validation_and_defaults() {
    let c = TrainConfig::default();
    assert!(c.validate().is_ok());
    assert_eq!((c.lambda, c.batch_size, c.epochs), (0.1, 8, 100));
    assert_eq!(c.rotation_set, vec![90, 180, 270]);
    let parsed: TrainConfig = serde_json::from_str(r#"{"lambda": 0.5, "noise_aug": {"kind": "gaussian", "std": 2.0}}"#).unwrap();
    assert_eq!(parsed.lambda, 0.5);
    assert_eq!(parsed.noise_aug, NoiseAug::Gaussian { std: 2.0 });
    assert_eq!(parsed.epochs, 100);
    for bad in [
        TrainConfig { lambda: -1.0, ..c.clone() },
        TrainConfig { learning_rate: 0.0, ..c.clone() },
        TrainConfig { batch_size: 0, ..c.clone() },
        TrainConfig { rotation_set: vec![], ..c.clone() },
        TrainConfig { rotation_set: vec![45], ..c.clone() },
        TrainConfig { noise_aug: NoiseAug::Gaussian { std: -1.0 }, ..c.clone() },
    ] {
        assert!(bad.validate().is_err());
    }
}

#[test]
fn augmentation_draws() {
    let m = model();
    let s = sample(&m, 1);
    let mut c = cfg(2);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let a = Augmentation::draw(&s.y, &c, &mut rng);
        assert!((1..=3).contains(&a.quarter_turns));
        assert!(a.y_aug.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0));
    }
    c.noise_aug = NoiseAug::None;
    assert_eq!(Augmentation::draw(&s.y, &c, &mut rng).y_aug, s.y);
    c.noise_aug = NoiseAug::Gaussian { std: 3.0 };
    let a = Augmentation::draw(&s.y, &c, &mut rng);
    assert!(a.y_aug.data().iter().all(|&v| v >= 0.0));
    assert_ne!(a.y_aug, s.y);
}

#[test]
fn evaluation_draws_are_fixed() {
    let m = model();
    let set = samples(&m, 0..3);
    let c = cfg(2);
    assert_eq!(evaluation_augmentations(&set, &c), evaluation_augmentations(&set, &c));
    // draws depend on the index, not on the surrounding set
    assert_eq!(evaluation_augmentations(&set[..1], &c)[0], evaluation_augmentations(&set, &c)[0]);
}

#[test]
fn zero_epochs_returns_initial_parameters() {
    let m = model();
    let set = samples(&m, 0..2);
    let c = TrainConfig { epochs: 0, ..cfg(2) };
    let theta0 = RegularizerParams::default_init(2, 0).unwrap();
    let state = train(&set, &[], &m, &theta0, &c).unwrap();
    assert_eq!(state.best_theta, theta0);
    assert_eq!(state.theta, theta0);
    assert_eq!(state.step, 0);
}

#[test]
fn too_few_phases_is_rejected() {
    let m = model();
    let set = samples(&m, 0..1);
    let theta0 = RegularizerParams::default_init(1, 0).unwrap();
    assert!(train(&set, &[], &m, &theta0, &cfg(2)).is_err());
    assert!(train(&[], &[], &m, &theta0, &cfg(1)).is_err());
}

#[test]
fn image_loss_is_invariant_to_quarter_turns_of_symmetric_data() {
    let m = model();
    let n = 16;
    let data = (0..n * n)
        .map(|j| {
            let (r, c) = ((j / n) as f64 - 7.5, (j % n) as f64 - 7.5);
            if r * r + c * c < 20.0 {
                2.0 + 0.1 * (r * r + c * c)
            } else {
                0.0
            }
        })
        .collect();
    let x = Image::new(n, data).unwrap();
    let b = Sinogram::filled(12, 24, 0.5);
    let y = m.forward(&x, &b).unwrap();
    let theta = symmetrize(&RegularizerParams::default_init(2, 4).unwrap());
    let c = cfg(2);
    let base = loss_image(&theta, &y, &b, &m, &c, 1).unwrap();
    assert!(base > 0.0);
    for q in [2, 3] {
        let l = loss_image(&theta, &y, &b, &m, &c, q).unwrap();
        assert!((l - base).abs() <= 1e-8 * base, "{q}: {l} vs {base}");
    }
}

#[test]
fn dual_gradient_matches_finite_differences() {
    let m = model();
    let s = sample(&m, 3);
    let c = TrainConfig { noise_aug: NoiseAug::Poisson, ..cfg(2) };
    let theta = RegularizerParams::default_init(2, 5).unwrap();
    let aug = Augmentation::draw(&s.y, &c, &mut ChaCha8Rng::seed_from_u64(9));
    let (rep, g) = sample_loss_and_grad(&theta, &s, &aug, &m, &c).unwrap();
    assert_eq!(rep, sample_loss(&theta, &s, &aug, &m, &c).unwrap());
    let flat = theta.flatten();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for _ in 0..3 {
        let d: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = 1e-6;
        let at = |t: f64| {
            let p: Vec<f64> = flat.iter().zip(&d).map(|(a, e)| a + t * e).collect();
            sample_loss(&theta.unflatten(&p).unwrap(), &s, &aug, &m, &c).unwrap().l_dual
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        let an: f64 = g.iter().zip(&d).map(|(a, e)| a * e).sum();
        assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "fd {fd} vs tape {an}");
    }
}

#[test]
fn gradient_is_nonzero_at_initialization() {
    let m = model();
    let s = sample(&m, 4);
    let c = cfg(2);
    let theta = RegularizerParams::default_init(2, 0).unwrap();
    let aug = Augmentation::draw(&s.y, &c, &mut ChaCha8Rng::seed_from_u64(1));
    for mode in LossMode::ALL {
        let cm = TrainConfig { loss_mode: mode, ..c.clone() };
        let (_, g) = sample_loss_and_grad(&theta, &s, &aug, &m, &cm).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>() > 0.0, "{}", mode.name());
        // kernels receive signal, not only the step sizes
        let kernel_part = theta.n_params() - 2 * theta.phases();
        assert!(g[..kernel_part].iter().any(|&v| v != 0.0), "{}", mode.name());
    }
}

#[test]
fn measurement_weight_changes_the_trajectory() {
    let m = model();
    let set = samples(&m, 0..2);
    let theta0 = RegularizerParams::default_init(2, 0).unwrap();
    let c = TrainConfig { epochs: 1, ..cfg(2) };
    let a = train(&set, &[], &m, &theta0, &TrainConfig { lambda: 0.0, ..c.clone() }).unwrap();
    let b = train(&set, &[], &m, &theta0, &TrainConfig { lambda: 0.1, ..c }).unwrap();
    assert_ne!(a.theta, b.theta);
}

#[test]
fn measurement_loss_is_positive_on_noisy_data() {
    let m = model();
    let s = sample(&m, 5);
    let theta = RegularizerParams::default_init(2, 0).unwrap().with_zero_kernels();
    let l = loss_measure(&theta, &s.y, &s.b, &m, &cfg(2).clone()).unwrap();
    assert!(l > 0.0);
}

#[test]
fn larger_perturbations_raise_the_measurement_loss() {
    let m = model();
    let s = sample(&m, 6);
    let c = cfg(2);
    let theta = RegularizerParams::default_init(2, 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let xi: Vec<f64> = s.y.data().iter().map(|_| rng.gen_range(-1.0..1.0) * 20.0).collect();
    let perturbed = |k: f64| {
        let d = s.y.data().iter().zip(&xi).map(|(v, e)| (v + k * e).max(0.0)).collect();
        Sinogram::new(12, 24, d).unwrap()
    };
    let l1 = loss_measure(&theta, &perturbed(1.0), &s.b, &m, &c).unwrap();
    let l2 = loss_measure(&theta, &perturbed(2.0), &s.b, &m, &c).unwrap();
    assert!(l2 > l1, "{l2} <= {l1}");
}

#[test]
fn training_lowers_the_objective_and_keeps_the_best() {
    let m = model();
    let set = samples(&m, 0..4);
    let val = samples(&m, 10..12);
    let theta0 = RegularizerParams::default_init(2, 0).unwrap();
    let c = TrainConfig { epochs: 3, learning_rate: 2e-2, ..cfg(2) };
    let state = train(&set, &val, &m, &theta0, &c).unwrap();
    let vals: Vec<f64> =
        state.history.iter().filter(|h| h.kind == HistoryKind::Validation).map(|h| h.l_dual).collect();
    assert_eq!(vals.len(), 4);
    let best = vals.iter().cloned().fold(f64::INFINITY, f64::min);
    assert_eq!(state.best_val, best);
    assert!(best < vals[0], "{vals:?}");
    assert_eq!(state.step, 3 * 2);
}

#[test]
fn resumed_training_matches_an_uninterrupted_run() {
    let m = model();
    let set = samples(&m, 0..3);
    let theta0 = RegularizerParams::default_init(2, 1).unwrap();
    let c = cfg(2);
    let full = train(&set, &[], &m, &theta0, &c).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let first = train(&set, &[], &m, &theta0, &TrainConfig { epochs: 1, ..c.clone() }).unwrap();
    save_checkpoint(dir.path(), &first, &c).unwrap();
    let (loaded, meta) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(meta.epochs_done, 1);
    assert_eq!(meta.config, c);
    assert_eq!(loaded.theta, first.theta);
    assert_eq!(loaded.optimizer, first.optimizer);
    assert_eq!(loaded.history, first.history);
    let mut calls = 0;
    let resumed = train_resume(loaded, &set, &[], &m, &c, |_| {
        calls += 1;
        Ok(())
    })
    .unwrap();
    assert_eq!(calls, 1);
    assert_eq!(resumed.theta, full.theta);
    assert_eq!(resumed.best_theta, full.best_theta);
    assert_eq!(resumed.best_val, full.best_val);
    assert_eq!(resumed.step, full.step);
}

#[test]
fn checkpoint_rejects_foreign_format() {
    let m = model();
    let set = samples(&m, 0..1);
    let c = TrainConfig { epochs: 0, ..cfg(2) };
    let state = train(&set, &[], &m, &RegularizerParams::default_init(2, 0).unwrap(), &c).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &state, &c).unwrap();
    let path = dir.path().join("state.json");
    let text = std::fs::read_to_string(&path).unwrap().replace("petrecon-checkpoint-v1", "other");
    std::fs::write(&path, text).unwrap();
    assert!(load_checkpoint(dir.path()).is_err());
}

#[test]
fn streams_are_independent_per_sample() {
    let a: u64 = stream_rng(0, 0, 1, 2).gen();
    assert_eq!(a, stream_rng(0, 0, 1, 2).gen::<u64>());
    assert_ne!(a, stream_rng(0, 0, 1, 3).gen::<u64>());
    assert_ne!(a, stream_rng(0, 0, 2, 2).gen::<u64>());
    assert_ne!(a, stream_rng(0, 1, 1, 2).gen::<u64>());
    assert_ne!(a, stream_rng(1, 0, 1, 2).gen::<u64>());
}
