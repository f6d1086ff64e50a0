//! Reconstruction algorithms: MLEM, EM-TV and the unrolled learned descent.

mod emtv;
mod lda;
mod likelihood;
mod mlem;

pub use emtv::{emtv, emtv_step, tv_gradient, DEFAULT_TV_PENALTY, TV_SMOOTHING};
pub use lda::{
    lda_reconstruct, lda_reconstruct_on_tape, Branch, LdaConfig, PhaseImages, PhaseRecord,
    SolverTrace,
};
pub use likelihood::{neg_loglik, neg_loglik_from_mean, neg_loglik_grad};
pub use mlem::{initial_image, mlem, mlem_step, BASELINE_ITERATIONS};
