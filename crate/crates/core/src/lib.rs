//! Reconstruction toolkit for 2D PET: an explicit strip-integral projector, MLEM and
//! EM-TV baselines, an unrolled learned-descent reconstructor with a learnable
//! smoothed `l2,1` regularizer, label-free dual-domain training, a scan simulator
//! and quantitative image metrics.

pub mod error;
pub mod gradcore;
pub mod image;
pub mod metrics;
pub mod phantom;
pub mod projector;
pub mod regularizer;
pub mod solvers;
pub mod trainer;

pub use error::{Error, Result};
pub use image::{Image, Sinogram};
