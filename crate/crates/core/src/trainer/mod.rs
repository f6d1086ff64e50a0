//! Label-free training of the unrolled reconstruction.
//!
//! The objective mixes an equivariance term in image space with a
//! self-consistency term in measurement space:
//!
//! ```text
//! L_image   = ‖T_r f(y) - f(A T_r f(y) + b)‖²
//! L_measure = ‖(y + ξ) - (A f(y + ξ) + b)‖²
//! L_dual    = L_image + λ L_measure
//! ```
//!
//! `T_r` is a quarter-turn rotation and `ξ` a random perturbation of the counts.

mod adam;
mod checkpoint;
mod losses;

use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::Sinogram;
use crate::projector::SystemModel;
use crate::regularizer::RegularizerParams;
use crate::solvers::LdaConfig;
use crate::{Error, Result};

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta};
pub use losses::{loss_image, loss_measure, sample_loss, sample_loss_and_grad, Augmentation};

/// Consecutive non-finite steps tolerated before training aborts.
pub const MAX_NONFINITE_RETRIES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseAug {
    /// `ξ = y' - y` with `y' ~ Poisson(y)`.
    Poisson,
    Gaussian { std: f64 },
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Image,
    Measure,
    Dual,
}

impl LossMode {
    pub const ALL: [LossMode; 3] = [LossMode::Image, LossMode::Measure, LossMode::Dual];

    /// Weights of `(L_image, L_measure)` in the optimized objective.
    pub fn weights(self, lambda: f64) -> (f64, f64) {
        match self {
            LossMode::Image => (1.0, 0.0),
            LossMode::Measure => (0.0, 1.0),
            LossMode::Dual => (1.0, lambda),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LossMode::Image => "image",
            LossMode::Measure => "measure",
            LossMode::Dual => "dual",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lambda: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Rotation angles in degrees; multiples of 90 only.
    pub rotation_set: Vec<u32>,
    pub noise_aug: NoiseAug,
    pub loss_mode: LossMode,
    /// Treat `T_r f(y)` as a fixed target in the image term.
    pub stop_gradient_target: bool,
    pub seed: u64,
    pub lda: LdaConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            learning_rate: 1e-4,
            batch_size: 8,
            epochs: 100,
            rotation_set: vec![90, 180, 270],
            noise_aug: NoiseAug::Poisson,
            loss_mode: LossMode::Dual,
            stop_gradient_target: false,
            seed: 0,
            lda: LdaConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidSpec(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidSpec(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidSpec("batch size must be positive".into()));
        }
        if self.rotation_set.is_empty() {
            return Err(Error::InvalidSpec("rotation set is empty".into()));
        }
        if let Some(a) = self.rotation_set.iter().find(|&&a| a % 90 != 0) {
            return Err(Error::InvalidSpec(format!("rotation {a} is not a multiple of 90 degrees")));
        }
        if let NoiseAug::Gaussian { std } = self.noise_aug {
            if !(std >= 0.0 && std.is_finite()) {
                return Err(Error::InvalidSpec(format!("noise std must be >= 0, got {std}")));
            }
        }
        self.lda.validate()
    }
}

/// One measured sinogram with its known randoms mean.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSample {
    pub y: Sinogram,
    pub b: Sinogram,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_image: f64,
    pub l_measure: f64,
    pub l_dual: f64,
}

impl LossReport {
    /// `l_dual` is formed here so the identity `l_dual = l_image + λ l_measure` is exact.
    pub fn new(l_image: f64, l_measure: f64, lambda: f64) -> Self {
        Self { l_image, l_measure, l_dual: l_image + lambda * l_measure }
    }

    /// The quantity `mode` minimizes.
    pub fn objective(&self, mode: LossMode, lambda: f64) -> f64 {
        let (wi, wm) = mode.weights(lambda);
        wi * self.l_image + wm * self.l_measure
    }

    pub fn is_finite(&self) -> bool {
        self.l_image.is_finite() && self.l_measure.is_finite() && self.l_dual.is_finite()
    }

    /// Mean of per-sample reports, summed in order.
    pub fn mean(reports: &[LossReport], lambda: f64) -> Self {
        let n = reports.len() as f64;
        let li = reports.iter().map(|r| r.l_image).sum::<f64>() / n;
        let lm = reports.iter().map(|r| r.l_measure).sum::<f64>() / n;
        Self::new(li, lm, lambda)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryKind {
    Train,
    Validation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryEntry {
    pub kind: HistoryKind,
    pub epoch: usize,
    pub step: usize,
    #[serde(with = "crate::metrics::extended_f64")]
    pub l_image: f64,
    #[serde(with = "crate::metrics::extended_f64")]
    pub l_measure: f64,
    #[serde(with = "crate::metrics::extended_f64")]
    pub l_dual: f64,
    pub learning_rate: f64,
    pub wall_time_s: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub theta: RegularizerParams,
    pub best_theta: RegularizerParams,
    pub best_val: f64,
    pub optimizer: Adam,
    pub learning_rate: f64,
    pub epochs_done: usize,
    pub step: usize,
    pub history: Vec<HistoryEntry>,
}

impl TrainState {
    pub fn new(theta0: RegularizerParams, cfg: &TrainConfig) -> Self {
        let n = theta0.n_params();
        Self {
            best_theta: theta0.clone(),
            theta: theta0,
            best_val: f64::INFINITY,
            optimizer: Adam::new(n),
            learning_rate: cfg.learning_rate,
            epochs_done: 0,
            step: 0,
            history: Vec::new(),
        }
    }
}

const TRAIN_STREAM: u64 = 0;
const EVAL_STREAM: u64 = 1;
const SHUFFLE_STREAM: u64 = 2;

/// Generator for one `(seed, purpose, epoch, sample)` combination; independent of
/// evaluation order and thread count.
pub(crate) fn stream_rng(seed: u64, purpose: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ purpose.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(((epoch as u64) << 32) | index as u64);
    rng
}

/// Augmentations used for every evaluation pass, so that different parameter sets
/// are compared on identical draws.
pub fn evaluation_augmentations(samples: &[TrainSample], cfg: &TrainConfig) -> Vec<Augmentation> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| Augmentation::draw(&s.y, cfg, &mut stream_rng(cfg.seed, EVAL_STREAM, 0, i)))
        .collect()
}

/// Mean losses of `theta` over `samples` with the given draws.
pub fn evaluate(
    theta: &RegularizerParams,
    samples: &[TrainSample],
    augs: &[Augmentation],
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    if samples.is_empty() || samples.len() != augs.len() {
        return Err(Error::InvalidSpec("evaluation needs one augmentation per sample".into()));
    }
    let reports = samples
        .par_iter()
        .zip(augs)
        .map(|(s, a)| match sample_loss(theta, s, a, model, cfg) {
            Err(Error::NonFiniteObjective { .. }) => Ok(LossReport::new(f64::NAN, f64::NAN, cfg.lambda)),
            other => other,
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports, cfg.lambda))
}

/// Mean report and mean gradient over a batch; `None` if any sample is non-finite.
fn batch_gradient(
    theta: &RegularizerParams,
    samples: &[TrainSample],
    batch: &[usize],
    epoch: usize,
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
) -> Result<Option<(LossReport, Vec<f64>)>> {
    let results = batch
        .par_iter()
        .map(|&i| {
            let aug = Augmentation::draw(&samples[i].y, cfg, &mut stream_rng(cfg.seed, TRAIN_STREAM, epoch, i));
            match sample_loss_and_grad(theta, &samples[i], &aug, model, cfg) {
                Ok(r) => Ok(Some(r)),
                Err(Error::NonFiniteObjective { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let mut reports = Vec::with_capacity(results.len());
    let mut grad = vec![0.0; theta.n_params()];
    for r in results {
        let Some((rep, g)) = r else { return Ok(None) };
        if !rep.is_finite() || g.iter().any(|v| !v.is_finite()) {
            return Ok(None);
        }
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / batch.len() as f64);
        reports.push(rep);
    }
    Ok(Some((LossReport::mean(&reports, cfg.lambda), grad)))
}

/// Trains from scratch; see [`train_resume`].
pub fn train(
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    model: &Arc<SystemModel>,
    theta0: &RegularizerParams,
    cfg: &TrainConfig,
) -> Result<TrainState> {
    train_resume(TrainState::new(theta0.clone(), cfg), train_set, val_set, model, cfg, |_| Ok(()))
}

/// Continues training `state` up to `cfg.epochs`, calling `on_epoch` after every
/// completed epoch (typically to write a checkpoint).
///
/// The best parameters are those with the lowest validation value of the
/// configured objective (training set if `val_set` is empty), starting from the
/// initial parameters.
/// A non-finite batch undoes the previous update and redoes it at half the
/// learning rate; after [`MAX_NONFINITE_RETRIES`] consecutive failures training
/// stops with [`Error::TrainingDiverged`].
pub fn train_resume(
    mut state: TrainState,
    train_set: &[TrainSample],
    val_set: &[TrainSample],
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    state.theta.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidSpec("training set is empty".into()));
    }
    if state.theta.phases() < cfg.lda.phases {
        return Err(Error::InvalidSpec(format!(
            "parameters hold {} phases, configuration asks for {}",
            state.theta.phases(),
            cfg.lda.phases
        )));
    }
    if state.epochs_done >= cfg.epochs {
        return Ok(state);
    }
    let started = Instant::now();
    let val = if val_set.is_empty() { train_set } else { val_set };
    let val_augs = evaluation_augmentations(val, cfg);

    if state.epochs_done == 0 && state.step == 0 {
        let rep = evaluate(&state.theta, val, &val_augs, model, cfg)?;
        state.history.push(entry(HistoryKind::Validation, 0, 0, &rep, state.learning_rate, &started));
        let score = rep.objective(cfg.loss_mode, cfg.lambda);
        if score.is_finite() {
            state.best_val = score;
            state.best_theta = state.theta.clone();
        }
    }

    let mut failures = 0;
    let mut last: Option<(RegularizerParams, Adam, Vec<f64>)> = None;
    for epoch in state.epochs_done..cfg.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut stream_rng(cfg.seed, SHUFFLE_STREAM, epoch, 0));
        for batch in order.chunks(cfg.batch_size) {
            let (rep, grad) = loop {
                if let Some(found) = batch_gradient(&state.theta, train_set, batch, epoch, model, cfg)? {
                    failures = 0;
                    break found;
                }
                failures += 1;
                if failures >= MAX_NONFINITE_RETRIES {
                    return Err(Error::TrainingDiverged { failures });
                }
                state.learning_rate *= 0.5;
                if let Some((theta, opt, g)) = &last {
                    let mut opt = opt.clone();
                    let mut flat = theta.flatten();
                    opt.step(&mut flat, g, state.learning_rate);
                    state.theta = theta.unflatten(&flat)?;
                    state.optimizer = opt;
                }
            };
            state.step += 1;
            state.history.push(entry(HistoryKind::Train, epoch + 1, state.step, &rep, state.learning_rate, &started));
            let snapshot = (state.theta.clone(), state.optimizer.clone(), grad.clone());
            let mut flat = state.theta.flatten();
            state.optimizer.step(&mut flat, &grad, state.learning_rate);
            state.theta = state.theta.unflatten(&flat)?;
            last = Some(snapshot);
        }
        state.epochs_done = epoch + 1;
        let rep = evaluate(&state.theta, val, &val_augs, model, cfg)?;
        state.history.push(entry(
            HistoryKind::Validation,
            epoch + 1,
            state.step,
            &rep,
            state.learning_rate,
            &started,
        ));
        let score = rep.objective(cfg.loss_mode, cfg.lambda);
        if score < state.best_val {
            state.best_val = score;
            state.best_theta = state.theta.clone();
        }
        on_epoch(&state)?;
    }
    Ok(state)
}

fn entry(kind: HistoryKind, epoch: usize, step: usize, rep: &LossReport, lr: f64, t0: &Instant) -> HistoryEntry {
    HistoryEntry {
        kind,
        epoch,
        step,
        l_image: rep.l_image,
        l_measure: rep.l_measure,
        l_dual: rep.l_dual,
        learning_rate: lr,
        wall_time_s: t0.elapsed().as_secs_f64(),
    }
}

#[cfg(test)]
mod tests;
