use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Adam, HistoryEntry, TrainConfig, TrainState};
use crate::image::{read_tensor, write_tensor, TensorHeader};
use crate::metrics::extended_f64;
use crate::regularizer::{load_params, save_params};
use crate::{Error, Result};

const FORMAT: &str = "petrecon-checkpoint-v1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub epochs_done: usize,
    pub step: usize,
    pub adam_t: u64,
    pub learning_rate: f64,
    #[serde(with = "extended_f64")]
    pub best_val: f64,
    pub config: TrainConfig,
}

/// Writes `theta`, `best_theta`, the optimizer moments, `state.json` and
/// `history.jsonl` into `dir`.
pub fn save_checkpoint(dir: &Path, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    fs::create_dir_all(dir)?;
    save_params(&state.theta, &dir.join("theta"))?;
    save_params(&state.best_theta, &dir.join("best_theta"))?;
    let n = state.optimizer.m.len();
    write_tensor(&dir.join("adam_m.tensor"), &TensorHeader::new(vec![n], "adam_m", None), &state.optimizer.m)?;
    write_tensor(&dir.join("adam_v.tensor"), &TensorHeader::new(vec![n], "adam_v", None), &state.optimizer.v)?;
    let meta = CheckpointMeta {
        format: FORMAT.into(),
        epochs_done: state.epochs_done,
        step: state.step,
        adam_t: state.optimizer.t,
        learning_rate: state.learning_rate,
        best_val: state.best_val,
        config: cfg.clone(),
    };
    fs::write(dir.join("state.json"), serde_json::to_string_pretty(&meta)?)?;
    let mut w = BufWriter::new(fs::File::create(dir.join("history.jsonl"))?);
    for h in &state.history {
        serde_json::to_writer(&mut w, h)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, CheckpointMeta)> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join("state.json"))?)?;
    if meta.format != FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format {}", meta.format)));
    }
    let theta = load_params(&dir.join("theta"))?;
    let best_theta = load_params(&dir.join("best_theta"))?;
    let (_, m) = read_tensor(&dir.join("adam_m.tensor"))?;
    let (_, v) = read_tensor(&dir.join("adam_v.tensor"))?;
    if m.len() != theta.n_params() || v.len() != theta.n_params() {
        return Err(Error::Format("optimizer state does not match parameter count".into()));
    }
    let mut history = Vec::new();
    for line in BufReader::new(fs::File::open(dir.join("history.jsonl"))?).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            history.push(serde_json::from_str::<HistoryEntry>(&line)?);
        }
    }
    let state = TrainState {
        theta,
        best_theta,
        best_val: meta.best_val,
        optimizer: Adam { m, v, t: meta.adam_t },
        learning_rate: meta.learning_rate,
        epochs_done: meta.epochs_done,
        step: meta.step,
        history,
    };
    Ok((state, meta))
}
