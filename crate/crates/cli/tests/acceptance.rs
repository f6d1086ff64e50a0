//! End-to-end acceptance checks. Each test prints one `criterion N: PASS|FAIL` line.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use petrecon::metrics::{crc, psnr};
use petrecon::projector::{GridSpec, SinogramSpec, SystemModel};
use petrecon::regularizer::{extract_features, grad_p_smoothed, p_smoothed, FeatureField, RegularizerParams};
use petrecon::solvers::{initial_image, lda_reconstruct, mlem, mlem_step, neg_loglik, neg_loglik_grad, LdaConfig};
use petrecon::trainer::{sample_loss, sample_loss_and_grad, Augmentation, TrainConfig, TrainSample};
use petrecon::gradcore::Tensor;
use petrecon::{Image, Sinogram};
use petrecon_cli::config::{AblationConfig, DatasetConfig};
use petrecon_cli::dataset::{simulate_all, Split};
use petrecon_cli::reconstruct::Method;
use petrecon_cli::{
    build_model, cmd_ablate, cmd_bias_variance, cmd_reconstruct, cmd_simulate, cmd_train, PipelineConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Written straight to the process stdout so the line survives output capture.
fn verdict(n: usize, pass: bool, detail: String) {
    let line = format!("criterion {n}: {} - {detail}\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(pass, "criterion {n} failed: {detail}");
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    num / den.max(1e-300)
}

fn model(n: usize, angles: usize, bins: usize) -> Arc<SystemModel> {
    Arc::new(SystemModel::build(GridSpec::new(n, 1.0).unwrap(), SinogramSpec::new(angles, bins, 1.0).unwrap()).unwrap())
}

fn small_config(n: usize, angles: usize, bins: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.grid = GridSpec::new(n, 1.0).unwrap();
    cfg.sinogram = SinogramSpec::new(angles, bins, 1.0).unwrap();
    cfg.scan.total_counts = 2e5;
    cfg.dataset = DatasetConfig { n_train: 4, n_val: 2, n_test: 2 };
    cfg.train.epochs = 2;
    cfg.train.batch_size = 2;
    cfg.train.learning_rate = 1e-2;
    cfg
}

/// Every regular file below `dir` except run manifests, with its bytes.
fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run.json" {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn criterion_1_adjoint() {
    let t = Instant::now();
    let m = model(64, 90, 96);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let x = Image::new(64, (0..64 * 64).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let s = Sinogram::new(90, 96, (0..90 * 96).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let lhs: f64 = m.project(&x).unwrap().data().iter().zip(s.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data().iter().zip(m.backproject(&s).unwrap().data()).map(|(a, b)| a * b).sum();
        worst = worst.max((lhs - rhs).abs() / (lhs.abs() + 1e-30));
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(1, worst < 1e-10 && secs < 10.0, format!("max relative error {worst:.2e} over 100 pairs in {secs:.2} s"));
}

#[test]
fn criterion_2_gradient_fidelity() {
    let t = Instant::now();
    let m = model(16, 24, 24);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let fov = m.fov_mask().clone();
    let x = fov.map(|f| f * rng.gen_range(0.5..2.0));
    let fd = |f: &dyn Fn(&Image) -> f64, x: &Image, h: f64| -> Vec<f64> {
        (0..x.len())
            .map(|j| {
                let mut p = x.clone();
                let mut q = x.clone();
                p.data_mut()[j] += h;
                q.data_mut()[j] -= h;
                (f(&p) - f(&q)) / (2.0 * h)
            })
            .collect()
    };

    let theta = RegularizerParams::default_init(4, 3).unwrap();
    let eps = 1e-3;
    let g_p = grad_p_smoothed(&theta, &x, eps).unwrap();
    let e_p = rel_err(g_p.data(), &fd(&|z| p_smoothed(&theta, z, eps).unwrap(), &x, 1e-6));

    let b = Sinogram::filled(24, 24, 0.5);
    let ybar = m.forward(&x, &b).unwrap();
    let y = Sinogram::new(24, 24, ybar.data().iter().map(|&v| (v + rng.gen_range(-1.0..1.0) * v.sqrt()).round().max(0.0)).collect()).unwrap();
    let g_l = neg_loglik_grad(&y, &x, &m, &b).unwrap();
    let e_l = rel_err(g_l.data(), &fd(&|z| neg_loglik(&y, z, &m, &b).unwrap(), &x, 1e-4));

    let cfg = TrainConfig::default();
    let sample = TrainSample { y: y.clone(), b: b.clone() };
    let aug = Augmentation::draw(&y, &cfg, &mut ChaCha8Rng::seed_from_u64(4));
    let (_, g) = sample_loss_and_grad(&theta, &sample, &aug, &m, &cfg).unwrap();
    let flat = theta.flatten();
    let mut e_dual: f64 = 0.0;
    // the unrolled map is only piecewise smooth (clipping, branch choice), so the
    // step stays below the spacing of its kinks
    let h = 1e-7;
    for _ in 0..5 {
        let d: Vec<f64> = (0..flat.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let at = |s: f64| {
            let p: Vec<f64> = flat.iter().zip(&d).map(|(a, e)| a + s * e).collect();
            sample_loss(&theta.unflatten(&p).unwrap(), &sample, &aug, &m, &cfg).unwrap().l_dual
        };
        let numeric = (at(h) - at(-h)) / (2.0 * h);
        let analytic: f64 = g.iter().zip(&d).map(|(a, e)| a * e).sum();
        e_dual = e_dual.max((numeric - analytic).abs() / analytic.abs());
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        2,
        e_p < 1e-6 && e_l < 1e-6 && e_dual < 1e-4 && secs < 120.0,
        format!("grad P_eps {e_p:.2e}, likelihood {e_l:.2e}, unrolled L_dual {e_dual:.2e} (5 directions), {secs:.1} s"),
    );
}

#[test]
fn criterion_3_smoothing_contract() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut failures = Vec::new();
    for i in 0..50 {
        let eps: f64 = 10f64.powf(rng.gen_range(-4.0..-1.0));
        // one position exactly at the seam, probed on both sides
        let m = rng.gen_range(1..6);
        let mut dir: Vec<f64> = (0..m).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        dir.iter_mut().for_each(|v| *v /= norm);
        let at = |r: f64| {
            let f = FeatureField { features: Tensor::new(vec![m, 1, 1], dir.iter().map(|v| v * r).collect()).unwrap() };
            f.smoothed_l21(eps)
        };
        let (below, on, above) = (at(eps * (1.0 - 1e-9)), at(eps), at(eps * (1.0 + 1e-9)));
        let near = |v: f64| (v - eps / 2.0).abs() <= 1.01e-9 * eps;
        if (on - eps / 2.0).abs() > 1e-15 || !near(below) || !near(above) {
            failures.push(format!("instance {i}: seam values {below} {on} {above} vs {}", eps / 2.0));
        }

        let theta = RegularizerParams::default_init(1, i).unwrap();
        let scale = 10f64.powf(rng.gen_range(-3.0..0.0));
        let x = Image::new(12, (0..144).map(|_| scale * rng.gen_range(0.0..1.0)).collect()).unwrap();
        let field = extract_features(&theta, &x).unwrap();
        let l21 = field.l21();
        let p = field.smoothed_l21(eps);
        let positions = field.norms().len() as f64;
        // the upper bound is attained when every norm reaches eps
        let slack = 1e-12 * l21;
        if !(p <= l21 + slack && l21 <= p + eps / 2.0 * positions + slack) {
            failures.push(format!("instance {i}: sandwich {p} <= {l21} <= {}", p + eps / 2.0 * positions));
        }
        let smaller = eps * rng.gen_range(0.01..1.0);
        if p_smoothed(&theta, &x, smaller).unwrap() < p_smoothed(&theta, &x, eps).unwrap() {
            failures.push(format!("instance {i}: not monotone between eps {eps} and {smaller}"));
        }
    }
    verdict(3, failures.is_empty(), format!("50 instances, {} violations, first: {}", failures.len(), failures.first().map_or("none", String::as_str)));
}

#[test]
fn criterion_4_descent() {
    let cfg = PipelineConfig { dataset: DatasetConfig { n_train: 0, n_val: 0, n_test: 20 }, ..PipelineConfig::default() };
    let m = build_model(&cfg).unwrap();
    let slices = simulate_all(&cfg, &m).unwrap();
    let lda = LdaConfig::default();
    let mut worst_gap = f64::NEG_INFINITY;
    let mut violations = 0;
    for (k, s) in slices.iter().enumerate() {
        let theta = RegularizerParams::default_init(lda.phases, 100 + k as u64).unwrap();
        let (x, trace) = lda_reconstruct(&s.y, &m, &s.b, &theta, &lda).unwrap();
        let mut prev = initial_image(&m, lda.x0_value);
        let mut eps_prev = lda.eps0;
        for rec in &trace.phases {
            let xk = &rec.images.as_ref().unwrap().x;
            let phi = |z: &Image| neg_loglik(&s.y, z, &m, &s.b).unwrap() + p_smoothed(&theta, z, rec.eps).unwrap();
            let gap = phi(xk) - phi(&prev);
            worst_gap = worst_gap.max(gap);
            if gap > 1e-9 * phi(&prev).abs() || rec.eps > eps_prev || rec.eps_next > rec.eps {
                violations += 1;
            }
            eps_prev = rec.eps;
            prev = xk.clone();
        }
        if x.data().iter().any(|&v| v < 0.0) {
            violations += 1;
        }
    }
    verdict(
        4,
        violations == 0,
        format!("20 reconstructions, {violations} violations, largest phase change of phi {worst_gap:.3e}"),
    );
}

#[test]
fn criterion_5_mlem_oracle() {
    let cfg = PipelineConfig { dataset: DatasetConfig { n_train: 0, n_val: 0, n_test: 8 }, ..PipelineConfig::default() };
    let m = build_model(&cfg).unwrap();
    let slices = simulate_all(&cfg, &m).unwrap();
    let mut non_monotone = 0;
    let mut fixed_point: f64 = 0.0;
    for s in &slices {
        let (_, history) = mlem(&s.y, &m, &s.b, &initial_image(&m, 1.0), 25).unwrap();
        non_monotone += history.windows(2).filter(|w| w[1] > w[0]).count();
        let noiseless = m.forward(&s.truth, &s.b).unwrap();
        let next = mlem_step(&s.truth, &noiseless, &m, &s.b).unwrap();
        let err = next.data().iter().zip(s.truth.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        fixed_point = fixed_point.max(err);
    }
    verdict(
        5,
        non_monotone == 0 && fixed_point < 1e-12,
        format!("8 test sinograms, {non_monotone} increases over 25 iterations, fixed-point error {fixed_point:.2e}"),
    );
}

#[test]
fn criterion_6_relative_quality() {
    let t = Instant::now();
    let mut cfg = PipelineConfig::default();
    cfg.train.epochs = 20;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("dataset");
    let ckpt = dir.path().join("checkpoint");
    cmd_simulate(&cfg, None, &data).unwrap();
    cmd_train(&cfg, None, &data, &ckpt, false).unwrap();
    for method in [Method::Mlem, Method::Lda] {
        let out = dir.path().join(method.name());
        cmd_reconstruct(&cfg, None, method, &data, Split::Test, Some(&ckpt), &out).unwrap();
    }
    let ds = petrecon_cli::dataset::Dataset::open(&data).unwrap();
    let (mut p_lda, mut p_mlem, mut c_lda, mut c_mlem) = (0.0, 0.0, 0.0, 0.0);
    let entries = ds.slices(Split::Test);
    let n = entries.len() as f64;
    for e in &entries {
        let truth = ds.truth(e).unwrap();
        let roi = ds.roi(e).unwrap();
        let file = format!("{}.tensor", e.name);
        let xl = Image::load(&dir.path().join("lda").join(&file)).unwrap();
        let xm = Image::load(&dir.path().join("mlem").join(&file)).unwrap();
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        p_lda += psnr(&xl, &truth).unwrap() / n;
        p_mlem += psnr(&xm, &truth).unwrap() / n;
        c_lda += mean(crc(&xl, &truth, &roi).unwrap()) / n;
        c_mlem += mean(crc(&xm, &truth, &roi).unwrap()) / n;
    }
    let secs = t.elapsed().as_secs_f64();
    verdict(
        6,
        p_lda >= p_mlem && c_lda >= c_mlem && secs < 4.0 * 3600.0,
        format!(
            "24 slices x 20 epochs; PSNR lda {p_lda:.2} vs mlem {p_mlem:.2} dB, CRC lda {c_lda:.3} vs mlem {c_mlem:.3}, {:.0} s",
            secs
        ),
    );
}

#[test]
fn criterion_7_ablation() {
    let t = Instant::now();
    let mut cfg = small_config(32, 36, 48);
    cfg.ablation = AblationConfig::default();
    cfg.scan.total_counts = 5e4;
    cfg.train.batch_size = 4;
    cfg.train.epochs = 20;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("dataset");
    let out = dir.path().join("ablation");
    cmd_simulate(&cfg, None, &data).unwrap();
    let rows = cmd_ablate(&cfg, None, &data, &out).unwrap();
    let table = fs::read_to_string(out.join("ablation.txt")).unwrap();
    let mut ok = rows.len() == 15 && table.lines().count() == 16;
    let mut detail = Vec::new();
    for &k in &[2, 4, 6, 8, 10] {
        let at = |mode: &str| rows.iter().find(|r| r.phases == k && r.loss_mode.name() == mode).unwrap().train_losses.l_dual;
        let (dual, image, measure) = (at("dual"), at("image"), at("measure"));
        ok &= dual <= image && dual <= measure;
        detail.push(format!("K{k}: {dual:.7e} vs {image:.7e}/{measure:.7e}"));
    }
    verdict(
        7,
        ok,
        format!("15 runs in {:.0} s, train L_dual dual vs image/measure: {}", t.elapsed().as_secs_f64(), detail.join("; ")),
    );
}

#[test]
fn criterion_8_bias_variance() {
    let mut cfg = small_config(32, 36, 48);
    cfg.bias_variance.realizations = 5;
    cfg.bias_variance.slices = 2;
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("dataset");
    let ckpt = dir.path().join("checkpoint");
    cmd_simulate(&cfg, None, &data).unwrap();
    cmd_train(&cfg, None, &data, &ckpt, false).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let first = cmd_bias_variance(&cfg, None, &data, &Method::ALL, Some(&ckpt), &a).unwrap();
    let second = cmd_bias_variance(&cfg, None, &data, &Method::ALL, Some(&ckpt), &b).unwrap();
    let details: Vec<serde_json::Value> =
        serde_json::from_str(&fs::read_to_string(a.join("bias_variance_slices.json")).unwrap()).unwrap();
    let realizations = details[0]["scan_seeds"].as_array().unwrap().len();
    let identical = first == second && snapshot(&a) == snapshot(&b);
    let finite = first.values().all(|v| v.bias.is_finite() && v.variance.is_finite() && v.variance > 0.0);
    let summary: Vec<String> = first.iter().map(|(m, v)| format!("{m} {:.4}/{:.2e}", v.bias, v.variance)).collect();
    verdict(
        8,
        identical && finite && realizations == 5,
        format!("R={realizations}, reruns identical: {identical}, bias/variance {}", summary.join(", ")),
    );
}

#[test]
fn criterion_9_determinism() {
    let cfg = PipelineConfig { dataset: DatasetConfig { n_train: 2, n_val: 1, n_test: 3 }, ..PipelineConfig::default() };
    let root = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let base = root.path().join(tag);
        cmd_simulate(&cfg, None, &base.join("dataset")).unwrap();
        cmd_reconstruct(&cfg, None, Method::Mlem, &base.join("dataset"), Split::Test, None, &base.join("mlem")).unwrap();
        snapshot(&base)
    };
    let (a, b) = (run("a"), run("b"));
    let differing: Vec<&String> = a.keys().filter(|k| a.get(*k) != b.get(*k)).collect();
    verdict(
        9,
        a == b && !a.is_empty(),
        format!("{} files compared, {} differ", a.len().max(b.len()), differing.len()),
    );
}
