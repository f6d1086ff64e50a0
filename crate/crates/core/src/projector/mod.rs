//! Strip-integral PET system model for 2D parallel-beam sinograms.
//!
//! Pixel `j = row * n + col` has its centre at
//! `x = (col + 1/2 - n/2) * pixel_size`, `y = (n/2 - row - 1/2) * pixel_size`.
//! View `a` has angle `a * pi / n_angles`; radial bin `b` covers
//! `s in [(b - n_bins/2) w, (b + 1 - n_bins/2) w]` with `s = x cos + y sin`.
//! `A[(a, b)][j]` is the area of pixel `j` inside that strip divided by `w`.

mod cache;
pub mod geometry;
mod sparse;

use std::f64::consts::PI;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::gradcore::LinearOperator;
use crate::image::{Image, Sinogram};
use crate::{Error, Result};

pub use sparse::CsrMatrix;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n_pixels_per_side: usize,
    #[serde(default = "one")]
    pub pixel_size: f64,
}

fn one() -> f64 {
    1.0
}

impl GridSpec {
    pub fn new(n_pixels_per_side: usize, pixel_size: f64) -> Result<Self> {
        let g = Self { n_pixels_per_side, pixel_size };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_pixels_per_side < 8 {
            return Err(Error::InvalidSpec(format!(
                "grid needs at least 8 pixels per side, got {}",
                self.n_pixels_per_side
            )));
        }
        if !(self.pixel_size > 0.0 && self.pixel_size.is_finite()) {
            return Err(Error::InvalidSpec(format!("pixel_size must be > 0, got {}", self.pixel_size)));
        }
        Ok(())
    }

    pub fn n_pixels(&self) -> usize {
        self.n_pixels_per_side * self.n_pixels_per_side
    }

    /// Radius of the inscribed field-of-view circle.
    pub fn fov_radius(&self) -> f64 {
        0.5 * self.n_pixels_per_side as f64 * self.pixel_size
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> (f64, f64) {
        let half = 0.5 * self.n_pixels_per_side as f64;
        (
            (col as f64 + 0.5 - half) * self.pixel_size,
            (half - row as f64 - 0.5) * self.pixel_size,
        )
    }

    pub fn in_fov(&self, row: usize, col: usize) -> bool {
        let (x, y) = self.pixel_center(row, col);
        x.hypot(y) <= self.fov_radius()
    }

    /// 1 inside the field of view, 0 outside.
    pub fn fov_mask(&self) -> Image {
        let n = self.n_pixels_per_side;
        let data = (0..n * n).map(|j| if self.in_fov(j / n, j % n) { 1.0 } else { 0.0 }).collect();
        Image::new(n, data).expect("square grid")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SinogramSpec {
    pub n_angles: usize,
    pub n_bins: usize,
    #[serde(default = "one")]
    pub bin_width: f64,
}

impl SinogramSpec {
    pub fn new(n_angles: usize, n_bins: usize, bin_width: f64) -> Result<Self> {
        let s = Self { n_angles, n_bins, bin_width };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles < 2 {
            return Err(Error::InvalidSpec(format!("need at least 2 angles, got {}", self.n_angles)));
        }
        if self.n_bins == 0 {
            return Err(Error::InvalidSpec("n_bins must be positive".into()));
        }
        if !(self.bin_width > 0.0 && self.bin_width.is_finite()) {
            return Err(Error::InvalidSpec(format!("bin_width must be > 0, got {}", self.bin_width)));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.n_angles * self.n_bins
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn angle(&self, a: usize) -> f64 {
        a as f64 * PI / self.n_angles as f64
    }

    /// Lower edge of radial bin `b`.
    pub fn bin_lo(&self, b: usize) -> f64 {
        (b as f64 - 0.5 * self.n_bins as f64) * self.bin_width
    }

    pub fn half_extent(&self) -> f64 {
        0.5 * self.n_bins as f64 * self.bin_width
    }
}

/// Explicit system matrix `A`, its column sums and the field-of-view mask.
#[derive(Clone, Debug)]
pub struct SystemModel {
    grid: GridSpec,
    sino: SinogramSpec,
    matrix: CsrMatrix,
    sensitivity: Image,
    fov_mask: Image,
}

impl SystemModel {
    pub fn build(grid: GridSpec, sino: SinogramSpec) -> Result<Self> {
        grid.validate()?;
        sino.validate()?;
        if sino.n_bins < grid.n_pixels_per_side {
            return Err(Error::InvalidSpec(format!(
                "{} radial bins cannot cover a {}-pixel grid",
                sino.n_bins, grid.n_pixels_per_side
            )));
        }
        let n = grid.n_pixels_per_side;
        let fov: Vec<usize> = (0..n * n).filter(|&j| grid.in_fov(j / n, j % n)).collect();
        let reach = fov
            .iter()
            .map(|&j| {
                let (x, y) = grid.pixel_center(j / n, j % n);
                x.hypot(y)
            })
            .fold(0.0, f64::max)
            + grid.pixel_size * std::f64::consts::FRAC_1_SQRT_2;
        if reach > sino.half_extent() {
            return Err(Error::InvalidSpec(format!(
                "field of view reaches |s| = {reach:.4} but the detector covers only {:.4}",
                sino.half_extent()
            )));
        }

        let per_angle: Vec<Vec<Vec<(u32, f64)>>> = (0..sino.n_angles)
            .into_par_iter()
            .map(|a| project_view(&grid, &sino, &fov, a))
            .collect();

        let rows = sino.len();
        let mut row_offsets = Vec::with_capacity(rows + 1);
        let mut col_indices = Vec::new();
        let mut values = Vec::new();
        row_offsets.push(0);
        for view in per_angle {
            for row in view {
                for (c, v) in row {
                    col_indices.push(c);
                    values.push(v);
                }
                row_offsets.push(values.len());
            }
        }
        let matrix = CsrMatrix::from_parts(rows, grid.n_pixels(), row_offsets, col_indices, values)
            .map_err(Error::Format)?;
        Ok(Self::from_matrix(grid, sino, matrix))
    }

    fn from_matrix(grid: GridSpec, sino: SinogramSpec, matrix: CsrMatrix) -> Self {
        let mut sens = vec![0.0; matrix.cols()];
        matrix.mul_transpose_vec(&vec![1.0; matrix.rows()], &mut sens);
        let n = grid.n_pixels_per_side;
        Self {
            grid,
            sino,
            matrix,
            sensitivity: Image::new(n, sens).expect("square grid"),
            fov_mask: grid.fov_mask(),
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    pub fn sino_spec(&self) -> &SinogramSpec {
        &self.sino
    }

    pub fn matrix(&self) -> &CsrMatrix {
        &self.matrix
    }

    /// `A^T 1`
    pub fn sensitivity(&self) -> &Image {
        &self.sensitivity
    }

    pub fn fov_mask(&self) -> &Image {
        &self.fov_mask
    }

    pub fn side(&self) -> usize {
        self.grid.n_pixels_per_side
    }

    fn check_image(&self, x: &Image) -> Result<()> {
        if x.side() != self.side() {
            return Err(Error::Dimension(format!(
                "image side {} does not match grid side {}",
                x.side(),
                self.side()
            )));
        }
        Ok(())
    }

    fn check_sino(&self, s: &Sinogram) -> Result<()> {
        if s.n_angles() != self.sino.n_angles || s.n_bins() != self.sino.n_bins {
            return Err(Error::Dimension(format!(
                "sinogram {}x{} does not match geometry {}x{}",
                s.n_angles(),
                s.n_bins(),
                self.sino.n_angles,
                self.sino.n_bins
            )));
        }
        Ok(())
    }

    /// `A x` without the additive term.
    pub fn project(&self, x: &Image) -> Result<Sinogram> {
        self.check_image(x)?;
        let mut out = vec![0.0; self.sino.len()];
        self.matrix.mul_vec(x.data(), &mut out);
        Sinogram::new(self.sino.n_angles, self.sino.n_bins, out)
    }

    /// `A x + b`
    pub fn forward(&self, x: &Image, b: &Sinogram) -> Result<Sinogram> {
        self.check_sino(b)?;
        let mut out = self.project(x)?;
        for (o, bi) in out.data_mut().iter_mut().zip(b.data()) {
            *o += bi;
        }
        Ok(out)
    }

    /// `A^T s`
    pub fn backproject(&self, s: &Sinogram) -> Result<Image> {
        self.check_sino(s)?;
        let mut out = vec![0.0; self.grid.n_pixels()];
        self.matrix.mul_transpose_vec(s.data(), &mut out);
        Image::new(self.side(), out)
    }

    pub fn zero_sinogram(&self) -> Sinogram {
        Sinogram::zeros(self.sino.n_angles, self.sino.n_bins)
    }

    /// Shared handle usable as a tape primitive.
    pub fn operator(self: &Arc<Self>) -> Arc<dyn LinearOperator> {
        Arc::clone(self) as Arc<dyn LinearOperator>
    }
}

impl LinearOperator for SystemModel {
    fn input_shape(&self) -> Vec<usize> {
        vec![1, self.side(), self.side()]
    }

    fn output_shape(&self) -> Vec<usize> {
        vec![self.sino.n_angles, self.sino.n_bins]
    }

    fn apply(&self, x: &[f64], out: &mut [f64]) {
        self.matrix.mul_vec(x, out);
    }

    fn apply_adjoint(&self, y: &[f64], out: &mut [f64]) {
        self.matrix.mul_transpose_vec(y, out);
    }
}

fn project_view(grid: &GridSpec, sino: &SinogramSpec, fov: &[usize], a: usize) -> Vec<Vec<(u32, f64)>> {
    let n = grid.n_pixels_per_side;
    let (sin_t, cos_t) = sino.angle(a).sin_cos();
    let p = grid.pixel_size;
    let w = sino.bin_width;
    let reach = 0.5 * p * (cos_t.abs() + sin_t.abs());
    let s_min = sino.bin_lo(0);
    let mut rows = vec![Vec::new(); sino.n_bins];
    for &j in fov {
        let (x, y) = grid.pixel_center(j / n, j % n);
        let sc = x * cos_t + y * sin_t;
        let lo = (((sc - reach - s_min) / w).floor().max(0.0)) as usize;
        let hi = ((((sc + reach - s_min) / w).ceil()) as usize).min(sino.n_bins);
        for (b, row) in rows.iter_mut().enumerate().take(hi).skip(lo) {
            let s_lo = sino.bin_lo(b) - sc;
            let area = geometry::square_strip_area(p, cos_t, sin_t, s_lo, s_lo + w);
            if area > 0.0 {
                row.push((j as u32, area / w));
            }
        }
    }
    rows
}

/// Sinogram of the image rotated by `quarter_turns` x 90 degrees counter-clockwise,
/// obtained by shifting views (requires an even number of views).
pub fn rotate_sinogram(s: &Sinogram, quarter_turns: i32) -> Result<Sinogram> {
    let na = s.n_angles();
    let nb = s.n_bins();
    if na % 2 != 0 {
        return Err(Error::InvalidSpec("view rotation needs an even number of angles".into()));
    }
    let half = na / 2;
    let mut cur = s.clone();
    for _ in 0..quarter_turns.rem_euclid(4) {
        let mut out = vec![0.0; na * nb];
        for a in 0..na {
            // rotated image at angle theta equals original at theta - pi/2
            let (src, flip) = if a >= half { (a - half, false) } else { (a + half, true) };
            for b in 0..nb {
                let sb = if flip { nb - 1 - b } else { b };
                out[a * nb + b] = cur.data()[src * nb + sb];
            }
        }
        cur = Sinogram::new(na, nb, out)?;
    }
    Ok(cur)
}

pub use cache::{load_system_model, save_system_model, SystemModelHeader};
