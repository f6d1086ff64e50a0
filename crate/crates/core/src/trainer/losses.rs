use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use super::{LossReport, NoiseAug, TrainConfig, TrainSample};
use crate::gradcore::{Tape, Var};
use crate::image::Sinogram;
use crate::phantom::sample_poisson;
use crate::projector::SystemModel;
use crate::regularizer::{ParamVars, RegularizerParams};
use crate::solvers::lda_reconstruct_on_tape;
use crate::Result;

/// Random choices for one sample in one pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmentation {
    pub quarter_turns: i32,
    /// `max(0, y + ξ)`.
    pub y_aug: Sinogram,
}

impl Augmentation {
    pub fn draw(y: &Sinogram, cfg: &TrainConfig, rng: &mut impl Rng) -> Self {
        let deg = cfg.rotation_set[rng.gen_range(0..cfg.rotation_set.len())];
        let quarter_turns = ((deg / 90) % 4) as i32;
        let data = match cfg.noise_aug {
            NoiseAug::Poisson => y.data().iter().map(|&v| sample_poisson(rng, v) as f64).collect(),
            NoiseAug::Gaussian { std } => {
                y.data().iter().map(|&v| (v + std * rng.sample::<f64, _>(StandardNormal)).max(0.0)).collect()
            }
            NoiseAug::None => y.data().to_vec(),
        };
        let y_aug = Sinogram::new(y.n_angles(), y.n_bins(), data).expect("same shape");
        Self { quarter_turns, y_aug }
    }
}

struct Ctx<'a, 't> {
    tape: &'t Tape,
    params: &'a ParamVars<'t>,
    theta: &'a RegularizerParams,
    model: &'a Arc<SystemModel>,
    b: &'a Sinogram,
    cfg: &'a TrainConfig,
}

impl<'t> Ctx<'_, 't> {
    fn reconstruct(&self, y: Var<'t>) -> Result<Var<'t>> {
        let (x, _) = lda_reconstruct_on_tape(self.tape, self.params, self.theta, y, self.model, self.b, &self.cfg.lda)?;
        Ok(x)
    }

    fn image_term(&self, y: &Sinogram, quarter_turns: i32) -> Result<Var<'t>> {
        let op = self.model.operator();
        let mut x_t = self.reconstruct(self.tape.constant(y.to_tensor()))?;
        if self.cfg.stop_gradient_target {
            x_t = x_t.detach();
        }
        let x_tr = x_t.rot90(quarter_turns)?;
        let y_re = x_tr.matvec(&op, false)?.add_const(&self.b.to_tensor())?;
        let x_hat = self.reconstruct(y_re)?;
        Ok(x_tr.sub(x_hat)?.sum_squares())
    }

    fn measure_term(&self, y_aug: &Sinogram) -> Result<Var<'t>> {
        let op = self.model.operator();
        let target = self.tape.constant(y_aug.to_tensor());
        let x = self.reconstruct(target)?;
        let mean = x.matvec(&op, false)?.add_const(&self.b.to_tensor())?;
        Ok(target.sub(mean)?.sum_squares())
    }
}

fn with_ctx<T>(
    theta: &RegularizerParams,
    b: &Sinogram,
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
    f: impl for<'a, 't> FnOnce(&Ctx<'a, 't>) -> Result<T>,
) -> Result<T> {
    let tape = Tape::new();
    let params = theta.register(&tape);
    let ctx = Ctx { tape: &tape, params: &params, theta, model, b, cfg };
    f(&ctx)
}

/// `‖T_r f(y) - f(A T_r f(y) + b)‖²` for a rotation of `quarter_turns`.
pub fn loss_image(
    theta: &RegularizerParams,
    y: &Sinogram,
    b: &Sinogram,
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
    quarter_turns: i32,
) -> Result<f64> {
    with_ctx(theta, b, model, cfg, |c| Ok(c.image_term(y, quarter_turns)?.value().item()))
}

/// `‖y_aug - (A f(y_aug) + b)‖²`.
pub fn loss_measure(
    theta: &RegularizerParams,
    y_aug: &Sinogram,
    b: &Sinogram,
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
) -> Result<f64> {
    with_ctx(theta, b, model, cfg, |c| Ok(c.measure_term(y_aug)?.value().item()))
}

pub fn sample_loss(
    theta: &RegularizerParams,
    sample: &TrainSample,
    aug: &Augmentation,
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
) -> Result<LossReport> {
    let li = loss_image(theta, &sample.y, &sample.b, model, cfg, aug.quarter_turns)?;
    let lm = loss_measure(theta, &aug.y_aug, &sample.b, model, cfg)?;
    Ok(LossReport::new(li, lm, cfg.lambda))
}

/// Losses of one sample and the gradient of the configured objective with
/// respect to the flattened parameters.
pub fn sample_loss_and_grad(
    theta: &RegularizerParams,
    sample: &TrainSample,
    aug: &Augmentation,
    model: &Arc<SystemModel>,
    cfg: &TrainConfig,
) -> Result<(LossReport, Vec<f64>)> {
    let (wi, wm) = cfg.loss_mode.weights(cfg.lambda);
    with_ctx(theta, &sample.b, model, cfg, |c| {
        let mut total: Option<Var> = None;
        let li = if wi != 0.0 {
            let v = c.image_term(&sample.y, aug.quarter_turns)?;
            total = Some(v.scale(wi));
            v.value().item()
        } else {
            loss_image(theta, &sample.y, &sample.b, model, cfg, aug.quarter_turns)?
        };
        let lm = if wm != 0.0 {
            let v = c.measure_term(&aug.y_aug)?;
            let weighted = v.scale(wm);
            total = Some(match total {
                Some(t) => t.add(weighted)?,
                None => weighted,
            });
            v.value().item()
        } else {
            loss_measure(theta, &aug.y_aug, &sample.b, model, cfg)?
        };
        let grad = match total {
            Some(t) => c.params.gradient(&c.tape.backward(t)?),
            None => vec![0.0; theta.n_params()],
        };
        Ok((LossReport::new(li, lm, cfg.lambda), grad))
    })
}
