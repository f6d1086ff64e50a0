//! Learnable group-sparsity regularizer `P(x) = sum_i ||g_i(x)||` where `g` is a
//! small convolutional feature extractor and `i` runs over pixel positions.
//!
//! The norm is smoothed Huber-style at level `eps`: each position contributes
//! `||g_i||^2 / (2 eps)` when `||g_i|| <= eps` and `||g_i|| - eps/2` otherwise.
//! Its gradient is `sum_i J_i^T g_i / max(||g_i||, eps)` with `J_i` the Jacobian of
//! `g_i`.

mod io;
mod params;

use crate::gradcore::{self, Tape, Tensor, Var};
use crate::image::Image;
use crate::{Error, Result};

pub use io::{load_params, save_params, ParamsManifest};
pub use params::{Architecture, ParamVars, RegularizerParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DELTA};

/// Piecewise-quadratic ReLU of half-width `delta` (continuously differentiable).
#[inline]
pub fn smoothed_relu(x: f64, delta: f64) -> f64 {
    if x <= -delta {
        0.0
    } else if x >= delta {
        x
    } else {
        x * x / (4.0 * delta) + 0.5 * x + 0.25 * delta
    }
}

#[inline]
pub fn smoothed_relu_deriv(x: f64, delta: f64) -> f64 {
    if x <= -delta {
        0.0
    } else if x >= delta {
        1.0
    } else {
        x / (2.0 * delta) + 0.5
    }
}

#[inline]
pub fn smoothed_relu_second(x: f64, delta: f64) -> f64 {
    if x <= -delta || x >= delta {
        0.0
    } else {
        1.0 / (2.0 * delta)
    }
}

/// Per-position feature vectors, shape `(m, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureField {
    pub features: Tensor,
}

impl FeatureField {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    /// `||g_i||` for every position, row-major.
    pub fn norms(&self) -> Vec<f64> {
        let s = self.features.shape();
        let plane = s[1] * s[2];
        let mut out = vec![0.0; plane];
        for chunk in self.features.data().chunks(plane) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v * v;
            }
        }
        out.into_iter().map(f64::sqrt).collect()
    }

    /// Unsmoothed `l2,1` norm.
    pub fn l21(&self) -> f64 {
        self.norms().iter().sum()
    }

    pub fn smoothed_l21(&self, eps: f64) -> f64 {
        self.norms().iter().map(|&n| huber(n, eps)).sum()
    }
}

#[inline]
fn huber(n: f64, eps: f64) -> f64 {
    if n <= eps {
        n * n / (2.0 * eps)
    } else {
        n - 0.5 * eps
    }
}

fn check_image(theta: &RegularizerParams, x: &Image) -> Result<()> {
    if x.is_empty() {
        return Err(Error::Dimension("empty image".into()));
    }
    theta.validate()
}

/// `g_theta(x)`: conv, smoothed ReLU, ..., conv (last layer linear).
pub fn extract_features(theta: &RegularizerParams, x: &Image) -> Result<FeatureField> {
    check_image(theta, x)?;
    let mut h = x.to_tensor();
    let last = theta.kernels.len() - 1;
    for (l, k) in theta.kernels.iter().enumerate() {
        h = gradcore::conv2d(&h, k)?;
        if l < last {
            h = h.map(|v| smoothed_relu(v, theta.delta));
        }
    }
    Ok(FeatureField { features: h })
}

pub fn p_smoothed(theta: &RegularizerParams, x: &Image, eps: f64) -> Result<f64> {
    check_eps(eps)?;
    Ok(extract_features(theta, x)?.smoothed_l21(eps))
}

pub fn l21_norm(theta: &RegularizerParams, x: &Image) -> Result<f64> {
    Ok(extract_features(theta, x)?.l21())
}

fn check_eps(eps: f64) -> Result<()> {
    if eps > 0.0 && eps.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("smoothing level must be > 0, got {eps}")))
    }
}

/// `g_i / max(||g_i||, eps)` for every position.
fn huber_direction(field: &Tensor, eps: f64) -> Tensor {
    let s = field.shape();
    let plane = s[1] * s[2];
    let ff = FeatureField { features: field.clone() };
    let denom: Vec<f64> = ff.norms().into_iter().map(|n| n.max(eps)).collect();
    let mut out = field.clone();
    for chunk in out.data_mut().chunks_mut(plane) {
        for (v, d) in chunk.iter_mut().zip(&denom) {
            *v /= d;
        }
    }
    out
}

/// Features of `x` recorded on `tape` (for reverse-mode passes through `g`).
pub fn features_on_tape<'t>(
    kernels: &[Var<'t>],
    delta: f64,
    x: Var<'t>,
) -> Result<Var<'t>> {
    let mut h = x;
    let last = kernels.len() - 1;
    for (l, k) in kernels.iter().enumerate() {
        h = h.conv2d(*k)?;
        if l < last {
            h = h.smoothed_relu(delta);
        }
    }
    Ok(h)
}

/// `grad P_eps(x)` by one reverse sweep through `g`, seeded with the per-position
/// scaled features.
pub fn grad_p_smoothed(theta: &RegularizerParams, x: &Image, eps: f64) -> Result<Image> {
    check_eps(eps)?;
    check_image(theta, x)?;
    let tape = Tape::new();
    let xv = tape.leaf(x.to_tensor());
    let kernels: Vec<Var<'_>> = theta.kernels.iter().map(|k| tape.constant(k.clone())).collect();
    let g = features_on_tape(&kernels, theta.delta, xv)?;
    let seed = huber_direction(&g.value(), eps);
    let grads = tape.backward_with_seed(g, seed)?;
    Image::from_tensor(&grads.wrt(xv))
}

/// `grad P_eps(x)` assembled from differentiable primitives, so that the result can
/// itself be differentiated with respect to the kernels and `x`.
pub fn grad_p_smoothed_on_tape<'t>(
    kernels: &[Var<'t>],
    delta: f64,
    x: Var<'t>,
    eps: f64,
) -> Result<Var<'t>> {
    check_eps(eps)?;
    // forward pass keeping pre-activations
    let mut pre = Vec::with_capacity(kernels.len());
    let mut h = x;
    let last = kernels.len() - 1;
    for (l, k) in kernels.iter().enumerate() {
        let z = h.conv2d(*k)?;
        if l < last {
            pre.push(z);
            h = z.smoothed_relu(delta);
        } else {
            h = z;
        }
    }
    let g = h;
    let m = g.shape()[0];
    let denom = g.channel_norm()?.clip_min(eps).broadcast_channels(m)?;
    let mut adj = g.div(denom)?;
    // backward pass written out with recorded primitives
    for l in (0..kernels.len()).rev() {
        adj = adj.conv2d_transpose(kernels[l])?;
        if l > 0 {
            adj = adj.mul(pre[l - 1].smoothed_relu_grad(delta))?;
        }
    }
    Ok(adj)
}
