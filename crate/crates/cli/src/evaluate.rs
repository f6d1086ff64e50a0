use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use petrecon::metrics::{comparison_table, evaluate_slices, EvalReport};
use petrecon::Image;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::manifest::RunRecorder;
use crate::reconstruct::image_file;
use crate::{write_json, Failure, Outcome};

pub const TABLE_FILE: &str = "comparison.txt";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasVariance {
    pub bias: f64,
    pub variance: f64,
}

/// Report names: directory names, made unique by a numeric suffix.
fn method_names(dirs: &[PathBuf]) -> Vec<String> {
    let mut seen: BTreeMap<String, usize> = BTreeMap::new();
    dirs.iter()
        .map(|d| {
            let base = d.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "recon".into());
            let n = seen.entry(base.clone()).or_insert(0);
            *n += 1;
            if *n == 1 {
                base
            } else {
                format!("{base}_{n}")
            }
        })
        .collect()
}

fn load_recon(dir: &Path, name: &str, truth: &Image) -> Outcome<Image> {
    let path = dir.join(image_file(name));
    if !path.is_file() {
        return Err(Failure::evaluate(format!("missing reconstruction {}", path.display())));
    }
    let img = Image::load(&path).map_err(|e| Failure::evaluate(format!("{}: {e}", path.display())))?;
    if img.side() != truth.side() {
        return Err(Failure::evaluate(format!(
            "{} is {}x{}, truth is {}x{}",
            path.display(),
            img.side(),
            img.side(),
            truth.side(),
            truth.side()
        )));
    }
    Ok(img)
}

/// Scores each reconstruction directory against the dataset's truth for `split`.
///
/// Writes `<method>.json` per directory and the combined `comparison.txt` into
/// `out`. `bias_variance` optionally maps report names to values for the table.
pub fn cmd_evaluate(
    dataset_dir: &Path,
    split: Split,
    recon_dirs: &[PathBuf],
    bias_variance: Option<&Path>,
    config_path: Option<&Path>,
    out: &Path,
) -> Outcome<Vec<EvalReport>> {
    if recon_dirs.is_empty() {
        return Err(Failure::config("nothing to evaluate"));
    }
    let data = Dataset::open(dataset_dir)?;
    let entries = data.slices(split);
    if entries.is_empty() {
        return Err(Failure::evaluate(format!("dataset has no {} slices", split.name())));
    }
    let bv: BTreeMap<String, BiasVariance> = match bias_variance {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::evaluate(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::evaluate(format!("{}: {e}", p.display())))?
        }
        None => BTreeMap::new(),
    };
    let mut run = RunRecorder::start("evaluate", config_path, data.config().seed);
    let names: Vec<String> = entries.iter().map(|e| e.name.clone()).collect();
    let truths = entries.iter().map(|e| data.truth(e)).collect::<Outcome<Vec<_>>>()?;
    let rois = entries.iter().map(|e| data.roi(e)).collect::<Outcome<Vec<_>>>()?;

    let methods = method_names(recon_dirs);
    let mut reports = Vec::with_capacity(recon_dirs.len());
    for (dir, method) in recon_dirs.iter().zip(&methods) {
        if !dir.is_dir() {
            return Err(Failure::evaluate(format!("reconstruction directory {} not found", dir.display())));
        }
        let recons = names
            .iter()
            .zip(&truths)
            .map(|(n, t)| load_recon(dir, n, t))
            .collect::<Outcome<Vec<_>>>()?;
        let slices = evaluate_slices(&names, &recons, &truths, &rois)
            .map_err(|e| Failure::evaluate(format!("{method}: {e}")))?;
        let mut report = EvalReport::new(method, slices).map_err(Failure::evaluate)?;
        if let Some(v) = bv.get(method) {
            report = report.with_bias_variance(v.bias, v.variance);
        }
        reports.push(report);
    }
    run.lap("evaluate");

    fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();
    for r in &reports {
        let file = format!("{}.json", r.method);
        write_json(&out.join(&file), r)?;
        artifacts.push(file);
    }
    fs::write(out.join(TABLE_FILE), comparison_table(&reports))?;
    artifacts.push(TABLE_FILE.into());
    run.finish(out, artifacts)?;
    Ok(reports)
}
