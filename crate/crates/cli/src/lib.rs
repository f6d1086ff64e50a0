//! Batch pipeline around `petrecon`: simulate a dataset, train the learned
//! reconstructor, reconstruct with every method, and evaluate.
//!
//! Every command validates its configuration and inputs before writing anything.

pub mod ablate;
pub mod bias_variance;
pub mod config;
pub mod dataset;
pub mod evaluate;
pub mod manifest;
pub mod reconstruct;
pub mod train;

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use petrecon::projector::SystemModel;

pub use ablate::cmd_ablate;
pub use bias_variance::cmd_bias_variance;
pub use config::PipelineConfig;
pub use dataset::cmd_simulate;
pub use evaluate::cmd_evaluate;
pub use reconstruct::{cmd_reconstruct, Method};
pub use train::cmd_train;

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGED: u8 = 3;
pub const EXIT_EVALUATE: u8 = 4;

/// Error with the process exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn new(code: u8, error: impl Into<anyhow::Error>) -> Self {
        Self { code, error: error.into() }
    }

    pub fn config(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_CONFIG, anyhow::anyhow!("{msg}"))
    }

    pub fn evaluate(msg: impl fmt::Display) -> Self {
        Self::new(EXIT_EVALUATE, anyhow::anyhow!("{msg}"))
    }

    /// Non-finite aborts map to their own code; anything else is `fallback`.
    pub fn from_core(e: petrecon::Error, fallback: u8) -> Self {
        let code = match e {
            petrecon::Error::NonFiniteObjective { .. } | petrecon::Error::TrainingDiverged { .. } => EXIT_DIVERGED,
            _ => fallback,
        };
        Self::new(code, e)
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:#}", self.error)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::new(1, e)
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::new(1, e)
    }
}

impl From<petrecon::Error> for Failure {
    fn from(e: petrecon::Error) -> Self {
        Self::from_core(e, 1)
    }
}

pub type Outcome<T> = std::result::Result<T, Failure>;

/// Default locations below the output root.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.root.join("checkpoint")
    }

    pub fn recon(&self, method: Method) -> PathBuf {
        self.root.join("recon").join(method.name())
    }

    pub fn eval(&self) -> PathBuf {
        self.root.join("eval")
    }

    pub fn ablation(&self) -> PathBuf {
        self.root.join("ablation")
    }

    pub fn bias_variance(&self) -> PathBuf {
        self.root.join("bias_variance")
    }
}

pub fn build_model(cfg: &PipelineConfig) -> Outcome<Arc<SystemModel>> {
    SystemModel::build(cfg.grid, cfg.sinogram).map(Arc::new).map_err(Failure::config)
}

pub(crate) fn require_dir(path: &Path, what: &str) -> Outcome<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::config(format!("{what} not found at {}", path.display())))
    }
}

pub(crate) fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Outcome<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
