use super::likelihood::{count_ratio, neg_loglik};
use crate::image::{Image, Sinogram};
use crate::projector::SystemModel;
use crate::{Error, Result};

/// Iterations used for the MLEM and EM-TV baselines.
pub const BASELINE_ITERATIONS: usize = 25;

pub(crate) fn check_nonnegative(x: &Image) -> Result<()> {
    if x.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidSpec("image must be nonnegative".into()));
    }
    Ok(())
}

/// `x <- x / (A^T 1) * A^T (y / (A x + b))`; pixels with zero sensitivity are set to 0.
pub fn mlem_step(x: &Image, y: &Sinogram, model: &SystemModel, b: &Sinogram) -> Result<Image> {
    check_nonnegative(x)?;
    let ybar = model.forward(x, b)?;
    let ratio = Sinogram::new(y.n_angles(), y.n_bins(), count_ratio(y.data(), ybar.data()))?;
    let bp = model.backproject(&ratio)?;
    let data = x
        .data()
        .iter()
        .zip(model.sensitivity().data())
        .zip(bp.data())
        .map(|((&xj, &sj), &bj)| if sj > 0.0 { xj / sj * bj } else { 0.0 })
        .collect();
    Image::new(x.side(), data)
}

/// Uniform start on the field of view.
pub fn initial_image(model: &SystemModel, value: f64) -> Image {
    model.fov_mask().map(|m| m * value)
}

/// Runs `iterations` MLEM steps from `x0`; returns the image and `-L` before the
/// first step and after every step.
pub fn mlem(
    y: &Sinogram,
    model: &SystemModel,
    b: &Sinogram,
    x0: &Image,
    iterations: usize,
) -> Result<(Image, Vec<f64>)> {
    let mut x = x0.clone();
    let mut history = vec![neg_loglik(y, &x, model, b)?];
    for _ in 0..iterations {
        x = mlem_step(&x, y, model, b)?;
        history.push(neg_loglik(y, &x, model, b)?);
    }
    Ok((x, history))
}
