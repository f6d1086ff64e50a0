//! Procedural brain-like phantoms and Poisson scan simulation.
//!
//! A phantom is an elliptical head: a gray-matter rim around a white-matter
//! interior, a few gray-matter nuclei inside the white matter, and tumors of
//! distinct radii. Each pixel takes the activity of the topmost region containing
//! its centre, so images are exactly piecewise constant.

mod poisson;

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::image::{Image, Sinogram};
use crate::metrics::RoiSpec;
use crate::projector::{GridSpec, SystemModel};
use crate::{Error, Result};

pub use poisson::sample_poisson;

pub const BACKGROUND: &str = "background";
pub const GRAY_MATTER: &str = "gray_matter";
pub const WHITE_MATTER: &str = "white_matter";
pub const TUMOR: &str = "tumor";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomSpec {
    pub seed: u64,
    /// Gray-matter nuclei placed inside the white matter.
    pub n_background_ellipses: usize,
    pub n_tumors: usize,
    /// Tumor radius range in pixels; radii are spread over it so that no two match.
    pub tumor_radius_range: (f64, f64),
    pub activity_levels: BTreeMap<String, f64>,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        let activity_levels = [
            (BACKGROUND, 0.0),
            (GRAY_MATTER, 1.0),
            (WHITE_MATTER, 0.25),
            (TUMOR, 2.0),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect();
        Self {
            seed: 0,
            n_background_ellipses: 3,
            n_tumors: 2,
            tumor_radius_range: (2.0, 5.0),
            activity_levels,
        }
    }
}

impl PhantomSpec {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        for key in [BACKGROUND, GRAY_MATTER, WHITE_MATTER, TUMOR] {
            match self.activity_levels.get(key) {
                Some(v) if *v >= 0.0 && v.is_finite() => {}
                Some(v) => {
                    return Err(Error::InvalidSpec(format!("activity of {key} must be >= 0, got {v}")))
                }
                None => return Err(Error::InvalidSpec(format!("missing activity level {key}"))),
            }
        }
        if let Some(k) = self
            .activity_levels
            .keys()
            .find(|k| ![BACKGROUND, GRAY_MATTER, WHITE_MATTER, TUMOR].contains(&k.as_str()))
        {
            return Err(Error::InvalidSpec(format!("unknown region {k}")));
        }
        let (lo, hi) = self.tumor_radius_range;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::InvalidSpec(format!("bad tumor radius range ({lo}, {hi})")));
        }
        Ok(())
    }

    fn level(&self, key: &str) -> f64 {
        self.activity_levels[key]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScanSpec {
    pub total_counts: f64,
    pub randoms_fraction: f64,
    pub seed: u64,
}

impl Default for ScanSpec {
    fn default() -> Self {
        Self { total_counts: 1e6, randoms_fraction: 0.2, seed: 0 }
    }
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.total_counts > 0.0 && self.total_counts.is_finite()) {
            return Err(Error::InvalidSpec(format!("total_counts must be > 0, got {}", self.total_counts)));
        }
        if !(0.0..1.0).contains(&self.randoms_fraction) {
            return Err(Error::InvalidSpec(format!(
                "randoms_fraction must be in [0, 1), got {}",
                self.randoms_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    angle: f64,
}

impl Ellipse {
    fn circle(cx: f64, cy: f64, r: f64) -> Self {
        Self { cx, cy, a: r, b: r, angle: 0.0 }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.angle.sin_cos();
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = (dx * c + dy * s) / self.a;
        let v = (-dx * s + dy * c) / self.b;
        u * u + v * v <= 1.0
    }
}

/// Region layout in units of pixels, centred at the grid centre.
struct Layout {
    head: Ellipse,
    white: Ellipse,
    nuclei: Vec<Ellipse>,
    tumors: Vec<Ellipse>,
}

fn layout(spec: &PhantomSpec, n: usize) -> Layout {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let r = 0.5 * n as f64;
    let head = Ellipse {
        cx: 0.0,
        cy: 0.0,
        a: r * rng.gen_range(0.70..0.78),
        b: r * rng.gen_range(0.82..0.90),
        angle: rng.gen_range(-0.15..0.15),
    };
    let rim = r * rng.gen_range(0.10..0.14);
    let white = Ellipse { a: head.a - rim, b: head.b - rim, ..head };

    let nuclei = (0..spec.n_background_ellipses)
        .map(|_| {
            let (u, v) = unit_disk_point(&mut rng, 0.55);
            Ellipse {
                cx: u * white.a,
                cy: v * white.b,
                a: r * rng.gen_range(0.05..0.10),
                b: r * rng.gen_range(0.03..0.06),
                angle: rng.gen_range(0.0..std::f64::consts::PI),
            }
        })
        .collect();

    let (lo, hi) = spec.tumor_radius_range;
    let count = spec.n_tumors.max(1) as f64;
    let mut tumors: Vec<Ellipse> = Vec::with_capacity(spec.n_tumors);
    for t in 0..spec.n_tumors {
        // one radius per equal sub-interval, so radii are distinct
        let band = (hi - lo) / count;
        let radius = lo + band * (t as f64 + rng.gen_range(0.2..0.8));
        let mut placed = None;
        for _ in 0..200 {
            let (u, v) = unit_disk_point(&mut rng, 1.0);
            let cx = u * (white.a - radius - 1.0).max(0.0);
            let cy = v * (white.b - radius - 1.0).max(0.0);
            let cand = Ellipse::circle(cx, cy, radius);
            let clear = tumors.iter().all(|o| {
                (o.cx - cx).hypot(o.cy - cy) > o.a + radius + 3.0
            });
            if clear && inside(&white, &cand) {
                placed = Some(cand);
                break;
            }
        }
        tumors.push(placed.unwrap_or(Ellipse::circle(0.0, 0.0, radius)));
    }
    Layout { head, white, nuclei, tumors }
}

fn unit_disk_point(rng: &mut ChaCha8Rng, scale: f64) -> (f64, f64) {
    loop {
        let u: f64 = rng.gen_range(-1.0..1.0);
        let v: f64 = rng.gen_range(-1.0..1.0);
        if u * u + v * v <= 1.0 {
            return (u * scale, v * scale);
        }
    }
}

/// Whether circle `c` lies inside ellipse `e` (sampled on the circle boundary).
fn inside(e: &Ellipse, c: &Ellipse) -> bool {
    (0..64).all(|i| {
        let t = i as f64 * std::f64::consts::TAU / 64.0;
        e.contains(c.cx + c.a * t.cos(), c.cy + c.a * t.sin())
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Region {
    Background,
    Gray,
    White,
    Tumor(usize),
}

fn region_map(spec: &PhantomSpec, n: usize) -> Vec<Region> {
    let lay = layout(spec, n);
    let half = 0.5 * n as f64;
    (0..n * n)
        .map(|j| {
            let (row, col) = (j / n, j % n);
            let x = col as f64 + 0.5 - half;
            let y = half - row as f64 - 0.5;
            if let Some(t) = lay.tumors.iter().position(|e| e.contains(x, y)) {
                Region::Tumor(t)
            } else if lay.nuclei.iter().any(|e| e.contains(x, y)) {
                Region::Gray
            } else if lay.white.contains(x, y) {
                Region::White
            } else if lay.head.contains(x, y) {
                Region::Gray
            } else {
                Region::Background
            }
        })
        .collect()
}

pub fn make_phantom(spec: &PhantomSpec, grid: &GridSpec) -> Result<Image> {
    spec.validate()?;
    grid.validate()?;
    let n = grid.n_pixels_per_side;
    let data = region_map(spec, n)
        .into_iter()
        .map(|r| match r {
            Region::Background => spec.level(BACKGROUND),
            Region::Gray => spec.level(GRAY_MATTER),
            Region::White => spec.level(WHITE_MATTER),
            Region::Tumor(_) => spec.level(TUMOR),
        })
        .collect();
    Image::new(n, data)
}

/// Tumor masks and a white-matter background mask kept at least two pixels away
/// from every other region.
pub fn make_roi(spec: &PhantomSpec, grid: &GridSpec) -> Result<RoiSpec> {
    spec.validate()?;
    let n = grid.n_pixels_per_side;
    let regions = region_map(spec, n);
    let fov = grid.fov_mask();
    let tumor_masks = (0..spec.n_tumors)
        .map(|t| regions.iter().map(|r| *r == Region::Tumor(t)).collect::<Vec<bool>>())
        .collect();
    let background_mask = (0..n * n)
        .map(|j| {
            let (row, col) = ((j / n) as isize, (j % n) as isize);
            let mut ok = regions[j] == Region::White && fov.data()[j] > 0.0;
            for dr in -2..=2isize {
                for dc in -2..=2isize {
                    let (r, c) = (row + dr, col + dc);
                    if r < 0 || c < 0 || r >= n as isize || c >= n as isize {
                        continue;
                    }
                    ok &= regions[(r * n as isize + c) as usize] == Region::White;
                }
            }
            ok
        })
        .collect();
    let roi = RoiSpec { tumor_masks, background_mask };
    roi.validate()?;
    Ok(roi)
}

/// Factor `c` such that the trues `A (c x_true)` sum to `(1 - f) N`.
///
/// `c x_true` is the activity in the units a reconstruction from the simulated
/// scan estimates, so metrics compare against it.
pub fn count_scale(x_true: &Image, model: &SystemModel, scan: &ScanSpec) -> Result<f64> {
    scan.validate()?;
    if x_true.data().iter().any(|&v| !(v >= 0.0)) {
        return Err(Error::InvalidSpec("phantom must be nonnegative".into()));
    }
    let total_trues = model.project(x_true)?.sum();
    if total_trues <= 0.0 {
        return Err(Error::ZeroImage(scan.total_counts));
    }
    Ok((1.0 - scan.randoms_fraction) * scan.total_counts / total_trues)
}

/// Poisson measurement of `x_true`.
///
/// The noise-free trues `A (c x_true)` are scaled to `(1 - f) N` counts, the
/// randoms are uniform with `f N` counts in total, and `y ~ Poisson(trues + b)`.
/// Returns `(y, b)`; `b` is the exact randoms mean.
pub fn simulate_scan(x_true: &Image, model: &SystemModel, scan: &ScanSpec) -> Result<(Sinogram, Sinogram)> {
    let mean = expected_counts(x_true, model, scan)?;
    let b_level = scan.randoms_fraction * scan.total_counts / mean.len() as f64;
    let b = Sinogram::filled(mean.n_angles(), mean.n_bins(), b_level);
    let mut rng = ChaCha8Rng::seed_from_u64(scan.seed);
    let y_data = mean.data().iter().map(|&m| sample_poisson(&mut rng, m) as f64).collect();
    let y = Sinogram::new(mean.n_angles(), mean.n_bins(), y_data)?;
    Ok((y, b))
}

/// Expected counts `c A x_true + b` under the scaling used by [`simulate_scan`].
pub fn expected_counts(x_true: &Image, model: &SystemModel, scan: &ScanSpec) -> Result<Sinogram> {
    let scale = count_scale(x_true, model, scan)?;
    let trues = model.project(x_true)?;
    let b_level = scan.randoms_fraction * scan.total_counts / trues.len() as f64;
    let data = trues.data().iter().map(|t| scale * t + b_level).collect();
    Sinogram::new(trues.n_angles(), trues.n_bins(), data)
}
