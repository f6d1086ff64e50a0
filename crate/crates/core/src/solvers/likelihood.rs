use crate::image::{Image, Sinogram};
use crate::projector::SystemModel;
use crate::Result;

/// `-L(y|x) = sum_i (ybar_i - y_i ln ybar_i)` with `ybar = A x + b` and `0 ln 0 = 0`.
/// Returns `+inf` when some `ybar_i = 0` while `y_i > 0`.
pub fn neg_loglik(y: &Sinogram, x: &Image, model: &SystemModel, b: &Sinogram) -> Result<f64> {
    let ybar = model.forward(x, b)?;
    Ok(neg_loglik_from_mean(y.data(), ybar.data()))
}

pub fn neg_loglik_from_mean(y: &[f64], ybar: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&yi, &mi) in y.iter().zip(ybar) {
        if yi > 0.0 {
            if mi <= 0.0 {
                return f64::INFINITY;
            }
            acc += mi - yi * mi.ln();
        } else {
            acc += mi;
        }
    }
    acc
}

/// `y_i / ybar_i`, zero where `ybar_i = 0` (such bins carry no information about
/// pixels with nonzero activity).
pub(crate) fn count_ratio(y: &[f64], ybar: &[f64]) -> Vec<f64> {
    y.iter().zip(ybar).map(|(&yi, &mi)| if mi > 0.0 { yi / mi } else { 0.0 }).collect()
}

/// Gradient of `-L`: `A^T 1 - A^T (y / ybar)`.
pub fn neg_loglik_grad(y: &Sinogram, x: &Image, model: &SystemModel, b: &Sinogram) -> Result<Image> {
    let ybar = model.forward(x, b)?;
    let ratio = Sinogram::new(y.n_angles(), y.n_bins(), count_ratio(y.data(), ybar.data()))?;
    let bp = model.backproject(&ratio)?;
    let sens = model.sensitivity();
    Image::new(x.side(), sens.data().iter().zip(bp.data()).map(|(s, q)| s - q).collect())
}
