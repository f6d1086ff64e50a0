use thiserror::Error;

use crate::gradcore::GradError;
use crate::solvers::SolverTrace;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error(transparent)]
    Grad(#[from] GradError),
    #[error("cannot scale an all-zero image to {0} counts")]
    ZeroImage(f64),
    #[error("non-finite objective in phase {phase}")]
    NonFiniteObjective { phase: usize, trace: Box<SolverTrace> },
    #[error("training aborted after {failures} consecutive non-finite steps")]
    TrainingDiverged { failures: usize },
    #[error("metric undefined: {0}")]
    Metric(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
