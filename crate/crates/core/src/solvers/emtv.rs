use super::mlem::{check_nonnegative, mlem_step};
use crate::image::{Image, Sinogram};
use crate::projector::SystemModel;
use crate::{Error, Result};

/// EM-TV penalty used for the baseline.
pub const DEFAULT_TV_PENALTY: f64 = 2e-5;

/// Squared-gradient floor inside the isotropic TV norm.
pub const TV_SMOOTHING: f64 = 1e-8;

/// Gradient of the smoothed isotropic total variation
/// `sum sqrt(dx^2 + dy^2 + TV_SMOOTHING)` with forward differences and Neumann
/// boundaries.
pub fn tv_gradient(x: &Image) -> Image {
    let n = x.side();
    let v = x.data();
    let mut dx = vec![0.0; n * n];
    let mut dy = vec![0.0; n * n];
    let mut norm = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let j = r * n + c;
            dx[j] = if c + 1 < n { v[j + 1] - v[j] } else { 0.0 };
            dy[j] = if r + 1 < n { v[j + n] - v[j] } else { 0.0 };
            norm[j] = (dx[j] * dx[j] + dy[j] * dy[j] + TV_SMOOTHING).sqrt();
        }
    }
    let mut g = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            let j = r * n + c;
            let mut acc = -(dx[j] + dy[j]) / norm[j];
            if c > 0 {
                acc += dx[j - 1] / norm[j - 1];
            }
            if r > 0 {
                acc += dy[j - n] / norm[j - n];
            }
            g[j] = acc;
        }
    }
    Image::new(n, g).expect("square image")
}

/// One MLEM update followed by a TV descent step preconditioned like EM,
/// `x <- max(0, x_em - beta * x_em / (A^T 1) * grad TV(x_em))`.
///
/// The penalty is expressed per projection view: `beta = penalty * sum(y) / n_angles`.
pub fn emtv_step(
    x: &Image,
    y: &Sinogram,
    model: &SystemModel,
    b: &Sinogram,
    penalty: f64,
) -> Result<Image> {
    if !(penalty >= 0.0) {
        return Err(Error::InvalidSpec(format!("TV penalty must be >= 0, got {penalty}")));
    }
    check_nonnegative(x)?;
    let em = mlem_step(x, y, model, b)?;
    if penalty == 0.0 {
        return Ok(em);
    }
    let beta = penalty * y.sum() / y.n_angles() as f64;
    let tv = tv_gradient(&em);
    let data = em
        .data()
        .iter()
        .zip(model.sensitivity().data())
        .zip(tv.data())
        .map(|((&e, &s), &g)| if s > 0.0 { (e - beta * e / s * g).max(0.0) } else { 0.0 })
        .collect();
    Image::new(x.side(), data)
}

pub fn emtv(
    y: &Sinogram,
    model: &SystemModel,
    b: &Sinogram,
    x0: &Image,
    iterations: usize,
    penalty: f64,
) -> Result<Image> {
    let mut x = x0.clone();
    for _ in 0..iterations {
        x = emtv_step(&x, y, model, b, penalty)?;
    }
    Ok(x)
}
