use std::path::Path;

use petrecon::trainer::{load_checkpoint, save_checkpoint, train_resume, TrainConfig, TrainState};

use crate::dataset::{Dataset, Split};
use crate::manifest::RunRecorder;
use crate::{build_model, Failure, Outcome, PipelineConfig, EXIT_CONFIG};

pub const STATE_FILE: &str = "state.json";

fn same_except_epochs(a: &TrainConfig, b: &TrainConfig) -> bool {
    TrainConfig { epochs: 0, ..a.clone() } == TrainConfig { epochs: 0, ..b.clone() }
}

/// Trains on the dataset's train split, selecting on its validation split, and
/// checkpoints into `checkpoint` after every epoch.
///
/// With `resume`, an existing checkpoint is continued; its training settings must
/// match `cfg.train` apart from the epoch count.
pub fn cmd_train(
    cfg: &PipelineConfig,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    checkpoint: &Path,
    resume: bool,
) -> Outcome<TrainState> {
    cfg.validate()?;
    let data = Dataset::open(dataset_dir)?;
    let dc = data.config();
    if dc.grid != cfg.grid || dc.sinogram != cfg.sinogram {
        return Err(Failure::config("configured geometry differs from the dataset's"));
    }
    let train_set = data.samples(Split::Train).map_err(|f| Failure::new(EXIT_CONFIG, f.error))?;
    let val_set = data.samples(Split::Val).map_err(|f| Failure::new(EXIT_CONFIG, f.error))?;
    if train_set.is_empty() {
        return Err(Failure::config("dataset has no training slices"));
    }
    let state = if resume && checkpoint.join(STATE_FILE).exists() {
        let (state, meta) = load_checkpoint(checkpoint).map_err(|e| Failure::from_core(e, EXIT_CONFIG))?;
        if !same_except_epochs(&meta.config, &cfg.train) {
            return Err(Failure::config("checkpoint was trained with different settings"));
        }
        state
    } else {
        let theta0 = cfg.theta0(cfg.train.lda.phases).map_err(Failure::config)?;
        TrainState::new(theta0, &cfg.train)
    };

    let mut run = RunRecorder::start("train", config_path, cfg.seed);
    let model = build_model(cfg)?;
    let state = train_resume(state, &train_set, &val_set, &model, &cfg.train, |s| {
        save_checkpoint(checkpoint, s, &cfg.train)
    })
    .map_err(|e| Failure::from_core(e, 1))?;
    save_checkpoint(checkpoint, &state, &cfg.train)?;
    run.lap("train");
    let artifacts = [
        "theta.json",
        "theta.bin",
        "best_theta.json",
        "best_theta.bin",
        "adam_m.tensor",
        "adam_v.tensor",
        STATE_FILE,
        "history.jsonl",
    ];
    run.finish(checkpoint, artifacts.iter().map(|s| s.to_string()).collect())?;
    Ok(state)
}
