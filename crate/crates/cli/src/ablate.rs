use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use petrecon::metrics::{evaluate_slices, EvalReport, MethodSummary};
use petrecon::regularizer::save_params;
use petrecon::solvers::lda_reconstruct;
use petrecon::trainer::{evaluate, evaluation_augmentations, train, LossMode, LossReport, TrainConfig};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::manifest::RunRecorder;
use crate::{build_model, write_json, Failure, Outcome, PipelineConfig, EXIT_CONFIG};

pub const REPORT_FILE: &str = "ablation.json";
pub const TABLE_FILE: &str = "ablation.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub phases: usize,
    pub loss_mode: LossMode,
    pub epochs: usize,
    /// All three losses of the selected parameters on the training split, with
    /// the same augmentation draws for every row.
    pub train_losses: LossReport,
    pub test: MethodSummary,
}

fn row_name(phases: usize, mode: LossMode) -> String {
    format!("K{phases}_{}", mode.name())
}

/// Trains one model per `(phase count, loss mode)` pair and reports training
/// losses and test-split image quality for each.
pub fn cmd_ablate(
    cfg: &PipelineConfig,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    out: &Path,
) -> Outcome<Vec<AblationRow>> {
    cfg.validate()?;
    let data = Dataset::open(dataset_dir)?;
    if data.config().grid != cfg.grid || data.config().sinogram != cfg.sinogram {
        return Err(Failure::config("configured geometry differs from the dataset's"));
    }
    let load = |split| data.samples(split).map_err(|f| Failure::new(EXIT_CONFIG, f.error));
    let (train_set, val_set, test_set) = (load(Split::Train)?, load(Split::Val)?, load(Split::Test)?);
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Failure::config("ablation needs training and test slices"));
    }
    let test_entries = data.slices(Split::Test);
    let names: Vec<String> = test_entries.iter().map(|e| e.name.clone()).collect();
    let truths = test_entries.iter().map(|e| data.truth(e)).collect::<Outcome<Vec<_>>>()?;
    let rois = test_entries.iter().map(|e| data.roi(e)).collect::<Outcome<Vec<_>>>()?;

    let mut run = RunRecorder::start("ablate", config_path, cfg.seed);
    let model = build_model(cfg)?;
    let mut rows = Vec::new();
    let mut trained = Vec::new();
    for &phases in &cfg.ablation.phases {
        for &mode in &cfg.ablation.loss_modes {
            let mut tc: TrainConfig = cfg.train.clone();
            tc.lda.phases = phases;
            tc.loss_mode = mode;
            let theta0 = cfg.theta0(phases).map_err(Failure::config)?;
            let state = train(&train_set, &val_set, &model, &theta0, &tc).map_err(|e| Failure::from_core(e, 1))?;
            let theta = state.best_theta;
            let augs = evaluation_augmentations(&train_set, &tc);
            let train_losses = evaluate(&theta, &train_set, &augs, &model, &tc)?;
            let recons = test_set
                .par_iter()
                .map(|s| lda_reconstruct(&s.y, &model, &s.b, &theta, &tc.lda).map(|(x, _)| x))
                .collect::<petrecon::Result<Vec<_>>>()
                .map_err(|e| Failure::from_core(e, 1))?;
            let slices = evaluate_slices(&names, &recons, &truths, &rois)?;
            let report = EvalReport::new(&row_name(phases, mode), slices)?;
            rows.push(AblationRow { phases, loss_mode: mode, epochs: tc.epochs, train_losses, test: report.summary });
            trained.push((row_name(phases, mode), theta));
            run.lap(&row_name(phases, mode));
        }
    }

    fs::create_dir_all(out.join("params"))?;
    let mut artifacts = vec![REPORT_FILE.to_string(), TABLE_FILE.to_string()];
    for (name, theta) in &trained {
        save_params(theta, &out.join("params").join(name))?;
        artifacts.push(format!("params/{name}.json"));
    }
    write_json(&out.join(REPORT_FILE), &rows)?;
    fs::write(out.join(TABLE_FILE), ablation_table(&rows))?;
    run.finish(out, artifacts)?;
    Ok(rows)
}

/// Aligned text table, one line per trained model.
pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:>6}  {:<8}  {:>14}  {:>14}  {:>14}  {:>14}  {:>8}  {:>8}  {:>8}",
        "Phases", "Loss", "L_image", "L_measure", "L_dual", "PSNR(dB)", "SSIM", "RMSE", "CRC"
    );
    for r in rows {
        let l = &r.train_losses;
        let t = &r.test;
        let _ = writeln!(
            s,
            "{:>6}  {:<8}  {:>14.6e}  {:>14.6e}  {:>14.6e}  {:>7.2}±{:<6.2}  {:>8.4}  {:>8.4}  {:>8.4}",
            r.phases,
            r.loss_mode.name(),
            l.l_image,
            l.l_measure,
            l.l_dual,
            t.psnr.mean,
            t.psnr.std,
            t.ssim.mean,
            t.rmse.mean,
            t.crc.mean
        );
    }
    s
}
