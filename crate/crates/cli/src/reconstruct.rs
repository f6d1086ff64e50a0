use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use petrecon::projector::SystemModel;
use petrecon::regularizer::{load_params, RegularizerParams};
use petrecon::solvers::{emtv, initial_image, lda_reconstruct, mlem, SolverTrace};
use petrecon::trainer::TrainSample;
use petrecon::Image;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Split};
use crate::manifest::RunRecorder;
use crate::{build_model, write_json, Failure, Outcome, PipelineConfig, EXIT_CONFIG};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Mlem,
    Emtv,
    Lda,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Mlem, Method::Emtv, Method::Lda];

    pub fn name(self) -> &'static str {
        match self {
            Method::Mlem => "mlem",
            Method::Emtv => "emtv",
            Method::Lda => "lda",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown method {s:?}; expected mlem, emtv or lda"))
    }
}

pub fn image_file(name: &str) -> String {
    format!("{name}.tensor")
}

pub fn trace_file(name: &str) -> String {
    format!("{name}.trace.json")
}

/// Best parameters of a training checkpoint directory.
pub fn load_trained(checkpoint: &Path) -> Outcome<RegularizerParams> {
    let stem = checkpoint.join("best_theta");
    if !stem.with_extension("json").is_file() {
        return Err(Failure::config(format!("no trained parameters in {}", checkpoint.display())));
    }
    load_params(&stem).map_err(|e| Failure::from_core(e, EXIT_CONFIG))
}

/// One reconstruction; `theta` is required for [`Method::Lda`].
pub fn reconstruct_one(
    method: Method,
    sample: &TrainSample,
    model: &Arc<SystemModel>,
    cfg: &PipelineConfig,
    theta: Option<&RegularizerParams>,
) -> petrecon::Result<(Image, Option<SolverTrace>)> {
    let r = &cfg.recon;
    let x0 = initial_image(model, r.x0_value);
    match method {
        Method::Mlem => Ok((mlem(&sample.y, model, &sample.b, &x0, r.mlem_iterations)?.0, None)),
        Method::Emtv => Ok((emtv(&sample.y, model, &sample.b, &x0, r.emtv_iterations, r.emtv_penalty)?, None)),
        Method::Lda => {
            let theta = theta.ok_or_else(|| petrecon::Error::InvalidSpec("learned reconstruction needs parameters".into()))?;
            let (x, trace) = lda_reconstruct(&sample.y, model, &sample.b, theta, &cfg.train.lda)?;
            Ok((x, Some(trace)))
        }
    }
}

/// Reconstructs every slice of `split`, writing `<slice>.tensor` (and a trace for
/// the learned method) into `out`.
pub fn cmd_reconstruct(
    cfg: &PipelineConfig,
    config_path: Option<&Path>,
    method: Method,
    dataset_dir: &Path,
    split: Split,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Outcome<Vec<String>> {
    cfg.validate()?;
    let data = Dataset::open(dataset_dir)?;
    if data.config().grid != cfg.grid || data.config().sinogram != cfg.sinogram {
        return Err(Failure::config("configured geometry differs from the dataset's"));
    }
    let theta = match method {
        Method::Lda => {
            let ckpt = checkpoint.ok_or_else(|| Failure::config("the learned method needs --checkpoint"))?;
            let theta = load_trained(ckpt)?;
            if theta.phases() < cfg.train.lda.phases {
                return Err(Failure::config(format!(
                    "checkpoint holds {} phases, configuration asks for {}",
                    theta.phases(),
                    cfg.train.lda.phases
                )));
            }
            Some(theta)
        }
        _ => None,
    };
    let entries = data.slices(split);
    if entries.is_empty() {
        return Err(Failure::config(format!("dataset has no {} slices", split.name())));
    }
    let samples = entries
        .iter()
        .map(|e| data.sample(e))
        .collect::<Outcome<Vec<_>>>()
        .map_err(|f| Failure::new(EXIT_CONFIG, f.error))?;

    let mut run = RunRecorder::start(&format!("reconstruct {method}"), config_path, cfg.seed);
    let model = build_model(cfg)?;
    let results = samples
        .par_iter()
        .map(|s| reconstruct_one(method, s, &model, cfg, theta.as_ref()))
        .collect::<petrecon::Result<Vec<_>>>()
        .map_err(|e| Failure::from_core(e, 1))?;
    run.lap("reconstruct");

    fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();
    for (entry, (image, trace)) in entries.iter().zip(results) {
        image.save(&out.join(image_file(&entry.name)), method.name(), None)?;
        artifacts.push(image_file(&entry.name));
        if let Some(trace) = trace {
            write_json(&out.join(trace_file(&entry.name)), &trace)?;
            artifacts.push(trace_file(&entry.name));
        }
    }
    run.lap("write");
    run.finish(out, artifacts.clone())?;
    Ok(artifacts)
}
