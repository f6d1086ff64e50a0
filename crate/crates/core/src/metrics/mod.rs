//! Image quality metrics and evaluation reports.
//!
//! PSNR peaks at `max(x_true)`; RMSE is relative to `‖x_true‖`. A perfect
//! reconstruction has PSNR `+inf`, serialized as the string `"inf"`.

mod report;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::image::Image;
use crate::{Error, Result};

pub use report::{comparison_table, extended_f64, EvalReport, MethodSummary, SliceMetrics, Stat};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiSpec {
    pub tumor_masks: Vec<Vec<bool>>,
    pub background_mask: Vec<bool>,
}

impl RoiSpec {
    /// Masks must be nonempty, equally sized and pairwise disjoint.
    pub fn validate(&self) -> Result<()> {
        let n = self.background_mask.len();
        if self.tumor_masks.is_empty() {
            return Err(Error::InvalidSpec("ROI has no tumor masks".into()));
        }
        let mut owner = vec![false; n];
        for (i, m) in self.tumor_masks.iter().chain(std::iter::once(&self.background_mask)).enumerate() {
            if m.len() != n {
                return Err(Error::Dimension(format!("ROI mask {i} has {} pixels, expected {n}", m.len())));
            }
            if !m.iter().any(|&b| b) {
                return Err(Error::InvalidSpec(format!("ROI mask {i} is empty")));
            }
            for (o, &b) in owner.iter_mut().zip(m) {
                if b && *o {
                    return Err(Error::InvalidSpec(format!("ROI mask {i} overlaps another mask")));
                }
                *o |= b;
            }
        }
        Ok(())
    }

    /// Additionally requires every masked pixel to lie in `fov` (nonzero entries).
    pub fn validate_in(&self, fov: &Image) -> Result<()> {
        self.validate()?;
        if self.background_mask.len() != fov.len() {
            return Err(Error::Dimension("ROI and field of view differ in size".into()));
        }
        let outside = self
            .tumor_masks
            .iter()
            .chain(std::iter::once(&self.background_mask))
            .any(|m| m.iter().zip(fov.data()).any(|(&b, &f)| b && f == 0.0));
        if outside {
            return Err(Error::InvalidSpec("ROI extends outside the field of view".into()));
        }
        Ok(())
    }
}

fn same_shape(a: &Image, b: &Image) -> Result<()> {
    if a.side() != b.side() {
        return Err(Error::Dimension(format!("images of side {} and {}", a.side(), b.side())));
    }
    Ok(())
}

fn l2(v: impl Iterator<Item = f64>) -> f64 {
    v.map(|t| t * t).sum::<f64>().sqrt()
}

fn require_nonzero(x_true: &Image) -> Result<()> {
    if x_true.data().iter().all(|&v| v == 0.0) {
        return Err(Error::Metric("reference image is identically zero".into()));
    }
    Ok(())
}

pub fn psnr(x_hat: &Image, x_true: &Image) -> Result<f64> {
    same_shape(x_hat, x_true)?;
    require_nonzero(x_true)?;
    let n = x_true.len() as f64;
    let rms = l2(x_hat.data().iter().zip(x_true.data()).map(|(a, b)| a - b)) / n.sqrt();
    if rms == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * (x_true.max() / rms).log10())
}

pub fn rmse(x_hat: &Image, x_true: &Image) -> Result<f64> {
    same_shape(x_hat, x_true)?;
    require_nonzero(x_true)?;
    let err = l2(x_hat.data().iter().zip(x_true.data()).map(|(a, b)| a - b));
    Ok(err / l2(x_true.data().iter().copied()))
}

fn gaussian_window() -> Vec<f64> {
    let h = (SSIM_WINDOW / 2) as f64;
    let w: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-(i as f64 - h).powi(2) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian filter over the valid region only.
fn filter_valid(v: &[f64], n: usize, w: &[f64]) -> Vec<f64> {
    let k = w.len();
    let m = n - k + 1;
    let mut rows = vec![0.0; n * m];
    for r in 0..n {
        for c in 0..m {
            rows[r * m + c] = (0..k).map(|t| w[t] * v[r * n + c + t]).sum();
        }
    }
    let mut out = vec![0.0; m * m];
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = (0..k).map(|t| w[t] * rows[(r + t) * m + c]).sum();
        }
    }
    out
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows.
pub fn ssim(x_hat: &Image, x_true: &Image) -> Result<f64> {
    same_shape(x_hat, x_true)?;
    require_nonzero(x_true)?;
    let n = x_true.side();
    if n < SSIM_WINDOW {
        return Err(Error::Metric(format!("SSIM needs images of side >= {SSIM_WINDOW}, got {n}")));
    }
    let l = x_true.max();
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let w = gaussian_window();
    let a = x_hat.data();
    let b = x_true.data();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect() };
    let mu_a = filter_valid(a, n, &w);
    let mu_b = filter_valid(b, n, &w);
    let e_aa = filter_valid(&prod(&|p, _| p * p), n, &w);
    let e_bb = filter_valid(&prod(&|_, q| q * q), n, &w);
    let e_ab = filter_valid(&prod(&|p, q| p * q), n, &w);
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok((total / mu_a.len() as f64).clamp(-1.0, 1.0))
}

fn masked_mean(x: &Image, mask: &[bool]) -> f64 {
    let (s, c) = x
        .data()
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .fold((0.0, 0usize), |(s, c), (v, _)| (s + v, c + 1));
    s / c as f64
}

/// Contrast recovery per tumor: recovered tumor-to-background contrast over the true one.
pub fn crc(x_hat: &Image, x_true: &Image, roi: &RoiSpec) -> Result<Vec<f64>> {
    same_shape(x_hat, x_true)?;
    roi.validate()?;
    if roi.background_mask.len() != x_true.len() {
        return Err(Error::Dimension("ROI and image differ in size".into()));
    }
    let bg_hat = masked_mean(x_hat, &roi.background_mask);
    let bg_true = masked_mean(x_true, &roi.background_mask);
    if bg_hat == 0.0 || bg_true == 0.0 {
        return Err(Error::Metric("background mean is zero".into()));
    }
    roi.tumor_masks
        .iter()
        .map(|m| {
            let true_contrast = masked_mean(x_true, m) / bg_true - 1.0;
            if true_contrast == 0.0 {
                return Err(Error::Metric("true tumor contrast is 1".into()));
            }
            Ok((masked_mean(x_hat, m) / bg_hat - 1.0) / true_contrast)
        })
        .collect()
}

/// Normalized bias and variance of `R >= 2` realizations against `x_true`.
pub fn bias_variance(reconstructions: &[Image], x_true: &Image) -> Result<(f64, f64)> {
    let r = reconstructions.len();
    if r < 2 {
        return Err(Error::Metric(format!("bias/variance needs at least 2 realizations, got {r}")));
    }
    for x in reconstructions {
        same_shape(x, x_true)?;
    }
    require_nonzero(x_true)?;
    let n = x_true.len();
    let mut mean = vec![0.0; n];
    for x in reconstructions {
        for (m, v) in mean.iter_mut().zip(x.data()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= r as f64);
    let mean_norm_sq: f64 = mean.iter().map(|v| v * v).sum();
    if mean_norm_sq == 0.0 {
        return Err(Error::Metric("mean reconstruction is identically zero".into()));
    }
    let bias = l2(mean.iter().zip(x_true.data()).map(|(a, b)| a - b)) / l2(x_true.data().iter().copied());
    let spread: f64 = reconstructions
        .iter()
        .map(|x| x.data().iter().zip(&mean).map(|(a, b)| (a - b).powi(2)).sum::<f64>())
        .sum();
    Ok((bias, spread / r as f64 / mean_norm_sq))
}

/// Per-slice PSNR, SSIM, RMSE and CRC, computed in parallel and kept in input order.
pub fn evaluate_slices(
    names: &[String],
    recons: &[Image],
    truths: &[Image],
    rois: &[RoiSpec],
) -> Result<Vec<SliceMetrics>> {
    if recons.len() != truths.len() || rois.len() != truths.len() || names.len() != truths.len() {
        return Err(Error::Dimension(format!(
            "{} names, {} reconstructions, {} references, {} ROIs",
            names.len(),
            recons.len(),
            truths.len(),
            rois.len()
        )));
    }
    (0..truths.len())
        .into_par_iter()
        .map(|i| {
            Ok(SliceMetrics {
                name: names[i].clone(),
                psnr: psnr(&recons[i], &truths[i])?,
                ssim: ssim(&recons[i], &truths[i])?,
                rmse: rmse(&recons[i], &truths[i])?,
                crc: crc(&recons[i], &truths[i], &rois[i])?,
            })
        })
        .collect()
}
