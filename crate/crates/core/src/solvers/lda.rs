//! Unrolled learned descent for `phi_eps(x) = -L(y|x) + P_eps(x; theta)`.
//!
//! Phase `k` (0-based, using `alpha_k`, `beta_k`, `eps_k`):
//! 1. `r = x + alpha (A^T (y / (A x + b)) - A^T 1)`
//! 2. `u = r - tau grad P_eps(r)` with `tau = alpha beta / (alpha + beta)`
//! 3. safeguard `v = x - alpha' grad phi_eps(x)`, `alpha' = alpha rho^m` for the first
//!    `m < max_line_search` with `phi_eps(v) <= phi_eps(x)`
//! 4. keep whichever of `u`, `v` has the smaller `phi_eps`
//! 5. shrink `eps` by `gamma` when `||grad phi_eps(x_new)|| < sigma gamma eps`
//!
//! Candidates are projected onto the nonnegative field-of-view images before they
//! are scored, so the accepted iterate never increases `phi_eps`. If no trial
//! step decreases the objective the safeguard falls back to `v = x` and the phase
//! is flagged.
//!
//! The whole computation is recorded on a [`Tape`]; branch decisions and the
//! accepted line-search exponent are constants of the recording.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::likelihood::{count_ratio, neg_loglik_from_mean};
use crate::gradcore::{LinearOperator, Tape, Var};
use crate::image::{Image, Sinogram};
use crate::projector::SystemModel;
use crate::regularizer::{self, grad_p_smoothed_on_tape, ParamVars, RegularizerParams};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LdaConfig {
    /// Number of unrolled phases.
    pub phases: usize,
    /// Line-search trials per phase.
    pub max_line_search: usize,
    /// Line-search shrink factor in (0, 1).
    pub rho: f64,
    /// Smoothing shrink factor in (0, 1).
    pub gamma: f64,
    /// Scale of the smoothing-shrink threshold.
    pub sigma_tol: f64,
    pub eps0: f64,
    /// Initial image value on the field of view.
    pub x0_value: f64,
}

impl Default for LdaConfig {
    fn default() -> Self {
        Self {
            phases: 4,
            max_line_search: 10,
            rho: 0.5,
            gamma: 0.9,
            sigma_tol: 1.0,
            eps0: 1e-3,
            x0_value: 1.0,
        }
    }
}

impl LdaConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(m.to_string()));
        if self.phases == 0 {
            return bad("need at least one phase");
        }
        if self.max_line_search == 0 {
            return bad("need at least one line-search trial");
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return bad("rho must lie in (0, 1)");
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("gamma must lie in (0, 1)");
        }
        if !(self.sigma_tol > 0.0 && self.eps0 > 0.0) {
            return bad("sigma_tol and eps0 must be positive");
        }
        if !(self.x0_value >= 0.0 && self.x0_value.is_finite()) {
            return bad("x0_value must be finite and nonnegative");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    /// Proximal candidate `u`.
    U,
    /// Safeguard candidate `v`.
    V,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: usize,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Safeguard step after line search (0 when the search failed).
    pub alpha_accepted: f64,
    pub line_search_trials: usize,
    pub line_search_failed: bool,
    pub branch: Branch,
    /// Smoothing level used in this phase.
    pub eps: f64,
    /// Smoothing level handed to the next phase.
    pub eps_next: f64,
    pub phi_prev: f64,
    pub phi_u: f64,
    pub phi_v: f64,
    /// `phi_eps` at the accepted iterate.
    pub phi: f64,
    pub grad_norm: f64,
    #[serde(skip)]
    pub images: Option<PhaseImages>,
}

#[derive(Clone, Debug)]
pub struct PhaseImages {
    pub r: Image,
    pub u: Image,
    pub v: Image,
    pub x: Image,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SolverTrace {
    pub phases: Vec<PhaseRecord>,
}

impl SolverTrace {
    pub fn any_line_search_failed(&self) -> bool {
        self.phases.iter().any(|p| p.line_search_failed)
    }
}

/// Value-level objective `phi_eps`.
struct Objective<'a> {
    model: &'a SystemModel,
    theta: &'a RegularizerParams,
    y: &'a [f64],
    b: &'a [f64],
    mask: &'a [f64],
}

impl Objective<'_> {
    fn mean(&self, x: &[f64]) -> Vec<f64> {
        let mut m = vec![0.0; self.b.len()];
        self.model.apply(x, &mut m);
        m.iter_mut().zip(self.b).for_each(|(mi, bi)| *mi += bi);
        m
    }

    fn value(&self, x: &Image, eps: f64) -> Result<f64> {
        let nll = neg_loglik_from_mean(self.y, &self.mean(x.data()));
        if !nll.is_finite() {
            return Ok(nll);
        }
        Ok(nll + regularizer::p_smoothed(self.theta, x, eps)?)
    }

    /// Gradient restricted to the field of view.
    fn gradient(&self, x: &Image, eps: f64) -> Result<Image> {
        let ratio = count_ratio(self.y, &self.mean(x.data()));
        let mut bp = vec![0.0; x.len()];
        self.model.apply_adjoint(&ratio, &mut bp);
        let gp = regularizer::grad_p_smoothed(self.theta, x, eps)?;
        let sens = self.model.sensitivity().data();
        let data = (0..x.len())
            .map(|j| self.mask[j] * (sens[j] - bp[j] + gp.data()[j]))
            .collect();
        Image::new(x.side(), data)
    }
}

fn project(x: &Image, mask: &[f64]) -> Image {
    let data = x.data().iter().zip(mask).map(|(v, m)| v.max(0.0) * m).collect();
    Image::new(x.side(), data).expect("same side")
}

fn norm(x: &Image) -> f64 {
    x.data().iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Reconstruct without keeping the recording.
pub fn lda_reconstruct(
    y: &Sinogram,
    model: &Arc<SystemModel>,
    b: &Sinogram,
    theta: &RegularizerParams,
    cfg: &LdaConfig,
) -> Result<(Image, SolverTrace)> {
    let tape = Tape::new();
    let params = theta.register(&tape);
    let yv = tape.constant(y.to_tensor());
    let (x, trace) = lda_reconstruct_on_tape(&tape, &params, theta, yv, model, b, cfg)?;
    Ok((Image::from_tensor(&x.value())?, trace))
}

/// Reconstruct on `tape`, differentiable with respect to `params` and `y`.
///
/// `theta` must hold the same values as `params`; it drives the value-only parts
/// (objective evaluations and line search).
pub fn lda_reconstruct_on_tape<'t>(
    tape: &'t Tape,
    params: &ParamVars<'t>,
    theta: &RegularizerParams,
    y: Var<'t>,
    model: &Arc<SystemModel>,
    b: &Sinogram,
    cfg: &LdaConfig,
) -> Result<(Var<'t>, SolverTrace)> {
    cfg.validate()?;
    theta.validate()?;
    if theta.phases() < cfg.phases {
        return Err(Error::InvalidSpec(format!(
            "parameters hold {} phases, configuration asks for {}",
            theta.phases(),
            cfg.phases
        )));
    }
    let y_val = y.value();
    if y_val.len() != b.len() || b.len() != model.sino_spec().len() {
        return Err(Error::Dimension("measurement, randoms and geometry disagree".into()));
    }
    if y_val.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidSpec("measured counts must be nonnegative".into()));
    }
    let side = model.side();
    let op: Arc<dyn LinearOperator> = model.operator();
    let b_t = b.to_tensor();
    let sens_t = model.sensitivity().to_tensor();
    let mask_img = model.fov_mask().clone();
    let mask_t = mask_img.to_tensor();
    let objective = Objective {
        model: model.as_ref(),
        theta,
        y: y_val.data(),
        b: b.data(),
        mask: mask_img.data(),
    };

    let mut x = tape.constant(mask_img.map(|m| m * cfg.x0_value).to_tensor());
    let mut eps = cfg.eps0;
    let mut trace = SolverTrace::default();

    for k in 0..cfg.phases {
        let x_img = Image::from_tensor(&x.value())?;
        let phi_prev = objective.value(&x_img, eps)?;

        // likelihood ascent direction at x
        let ybar = x.matvec(&op, false)?.add_const(&b_t)?;
        let ascent = y.div(ybar)?.matvec(&op, true)?.sub_const(&sens_t)?;
        let alpha = params.log_alpha[k].exp();
        let beta = params.log_beta[k].exp();
        let r = x.add(alpha.scalar_mul(ascent)?)?;

        // proximal candidate
        let tau = alpha.mul(beta)?.div(alpha.add(beta)?)?;
        let gp_r = grad_p_smoothed_on_tape(&params.kernels, params.delta, r, eps)?;
        let u = r.sub(tau.scalar_mul(gp_r)?)?.clip_min(0.0).mul_const(&mask_t)?;
        let u_img = Image::from_tensor(&u.value())?;
        let phi_u = objective.value(&u_img, eps)?;

        // safeguard candidate with backtracking
        let alpha_val = alpha.value().item();
        let grad_x = objective.gradient(&x_img, eps)?;
        let mut accepted = None;
        let mut step = alpha_val;
        let mut trials = 0;
        let mut v_img = x_img.clone();
        let mut phi_v = phi_prev;
        for m in 0..cfg.max_line_search {
            trials = m + 1;
            let cand = Image::new(
                side,
                x_img.data().iter().zip(grad_x.data()).map(|(xv, g)| xv - step * g).collect(),
            )?;
            let cand = project(&cand, mask_img.data());
            let phi = objective.value(&cand, eps)?;
            if phi <= phi_prev {
                accepted = Some(m);
                v_img = cand;
                phi_v = phi;
                break;
            }
            step *= cfg.rho;
        }
        let failed = accepted.is_none();

        let (branch, x_next, phi) = if phi_u <= phi_v {
            (Branch::U, u, phi_u)
        } else {
            let v = match accepted {
                Some(m) => {
                    let gp_x = grad_p_smoothed_on_tape(&params.kernels, params.delta, x, eps)?;
                    let grad = ascent.neg().add(gp_x)?.mul_const(&mask_t)?;
                    let step = alpha.scale(cfg.rho.powi(m as i32));
                    x.sub(step.scalar_mul(grad)?)?.clip_min(0.0).mul_const(&mask_t)?
                }
                None => x,
            };
            (Branch::V, v, phi_v)
        };

        let x_next_img = Image::from_tensor(&x_next.value())?;
        let grad_norm = norm(&objective.gradient(&x_next_img, eps)?);
        let eps_next = if grad_norm < cfg.sigma_tol * cfg.gamma * eps { cfg.gamma * eps } else { eps };

        trace.phases.push(PhaseRecord {
            phase: k + 1,
            alpha: alpha_val,
            beta: beta.value().item(),
            tau: tau.value().item(),
            alpha_accepted: accepted.map_or(0.0, |m| alpha_val * cfg.rho.powi(m as i32)),
            line_search_trials: trials,
            line_search_failed: failed,
            branch,
            eps,
            eps_next,
            phi_prev,
            phi_u,
            phi_v,
            phi,
            grad_norm,
            images: Some(PhaseImages {
                r: Image::from_tensor(&r.value())?,
                u: u_img,
                v: v_img,
                x: x_next_img,
            }),
        });
        if !phi.is_finite() || !phi_prev.is_finite() {
            return Err(Error::NonFiniteObjective { phase: k + 1, trace: Box::new(trace) });
        }
        x = x_next;
        eps = eps_next;
    }
    Ok((x, trace))
}
