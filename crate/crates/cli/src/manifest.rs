use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{write_json, Failure, Outcome};

pub const RUN_FILE: &str = "run.json";

/// Record of one command invocation, written as `run.json` next to its outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<PathBuf>,
    pub seed: u64,
    pub version: String,
    /// Paths relative to the directory holding `run.json`.
    pub artifacts: Vec<String>,
    pub timings_s: BTreeMap<String, f64>,
}

/// `git describe` of the working directory when available, else the crate version.
pub fn version_string() -> String {
    let described = Command::new("git")
        .args(["describe", "--tags", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty());
    match described {
        Some(d) => format!("v{}-{d}", env!("CARGO_PKG_VERSION")),
        None => format!("v{}", env!("CARGO_PKG_VERSION")),
    }
}

/// Collects timings while a command runs.
pub struct RunRecorder {
    command: String,
    config_path: Option<PathBuf>,
    seed: u64,
    started: Instant,
    lap: Instant,
    timings: BTreeMap<String, f64>,
}

impl RunRecorder {
    pub fn start(command: &str, config_path: Option<&Path>, seed: u64) -> Self {
        let now = Instant::now();
        Self {
            command: command.into(),
            config_path: config_path.map(Path::to_path_buf),
            seed,
            started: now,
            lap: now,
            timings: BTreeMap::new(),
        }
    }

    /// Time since the previous lap, stored under `name`.
    pub fn lap(&mut self, name: &str) {
        let now = Instant::now();
        self.timings.insert(name.into(), (now - self.lap).as_secs_f64());
        self.lap = now;
    }

    /// Writes `dir/run.json` after checking that every artifact exists.
    pub fn finish(mut self, dir: &Path, artifacts: Vec<String>) -> Outcome<RunManifest> {
        if let Some(missing) = artifacts.iter().find(|a| !dir.join(a).exists()) {
            return Err(Failure::new(1, anyhow::anyhow!("artifact {missing} was not written")));
        }
        self.timings.insert("total".into(), self.started.elapsed().as_secs_f64());
        let manifest = RunManifest {
            command: self.command,
            config_path: self.config_path,
            seed: self.seed,
            version: version_string(),
            artifacts,
            timings_s: self.timings,
        };
        write_json(&dir.join(RUN_FILE), &manifest)?;
        Ok(manifest)
    }
}
