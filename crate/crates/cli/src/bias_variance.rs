use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use petrecon::metrics::bias_variance;
use petrecon::trainer::TrainSample;
use petrecon::Image;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, SeedTag};
use crate::dataset::{simulate_slice, Dataset, Split};
use crate::evaluate::BiasVariance;
use crate::manifest::RunRecorder;
use crate::reconstruct::{load_trained, reconstruct_one, Method};
use crate::{build_model, write_json, Failure, Outcome, PipelineConfig};

pub const SUMMARY_FILE: &str = "bias_variance.json";
pub const DETAILS_FILE: &str = "bias_variance_slices.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceBiasVariance {
    pub slice: String,
    pub scan_seeds: Vec<u64>,
    pub methods: BTreeMap<String, BiasVariance>,
}

/// Seed of realization `r` of test slice `slice`; disjoint from the dataset's scans.
pub fn realization_seed(root: u64, slice: usize, realizations: usize, r: usize) -> u64 {
    derive_seed(root, SeedTag::Realization, (slice * realizations + r) as u64)
}

/// Simulates `cfg.bias_variance.realizations` fresh noisy scans of each test
/// phantom, reconstructs them with every method and reports the mean normalized
/// bias and variance over slices.
pub fn cmd_bias_variance(
    cfg: &PipelineConfig,
    config_path: Option<&Path>,
    dataset_dir: &Path,
    methods: &[Method],
    checkpoint: Option<&Path>,
    out: &Path,
) -> Outcome<BTreeMap<String, BiasVariance>> {
    cfg.validate()?;
    let data = Dataset::open(dataset_dir)?;
    if data.config().grid != cfg.grid || data.config().sinogram != cfg.sinogram {
        return Err(Failure::config("configured geometry differs from the dataset's"));
    }
    if methods.is_empty() {
        return Err(Failure::config("no methods selected"));
    }
    let theta = if methods.contains(&Method::Lda) {
        let ckpt = checkpoint.ok_or_else(|| Failure::config("the learned method needs --checkpoint"))?;
        Some(load_trained(ckpt)?)
    } else {
        None
    };
    let entries: Vec<_> = data.slices(Split::Test).into_iter().take(cfg.bias_variance.slices).collect();
    if entries.is_empty() {
        return Err(Failure::config("dataset has no test slices"));
    }

    let mut run = RunRecorder::start("bias-variance", config_path, cfg.seed);
    let model = build_model(cfg)?;
    let r_count = cfg.bias_variance.realizations;
    let sim_cfg = data.config();
    let jobs: Vec<(usize, usize)> = (0..entries.len()).flat_map(|s| (0..r_count).map(move |r| (s, r))).collect();
    let recons = jobs
        .par_iter()
        .map(|&(s, r)| {
            let seed = realization_seed(cfg.seed, s, r_count, r);
            let (truth, _, _, y, b) = simulate_slice(sim_cfg, &model, entries[s].phantom_seed, seed)?;
            let sample = TrainSample { y, b };
            let images = methods
                .iter()
                .map(|&m| reconstruct_one(m, &sample, &model, cfg, theta.as_ref()).map(|(x, _)| x))
                .collect::<petrecon::Result<Vec<Image>>>()?;
            Ok((seed, truth, images))
        })
        .collect::<petrecon::Result<Vec<_>>>()
        .map_err(|e| Failure::from_core(e, 1))?;
    run.lap("reconstruct");

    let mut details = Vec::with_capacity(entries.len());
    for (s, entry) in entries.iter().enumerate() {
        let block = &recons[s * r_count..(s + 1) * r_count];
        let truth = &block[0].1;
        let mut per_method = BTreeMap::new();
        for (k, m) in methods.iter().enumerate() {
            let images: Vec<Image> = block.iter().map(|(_, _, imgs)| imgs[k].clone()).collect();
            let (bias, variance) = bias_variance(&images, truth).map_err(|e| Failure::new(1, e))?;
            per_method.insert(m.name().to_string(), BiasVariance { bias, variance });
        }
        details.push(SliceBiasVariance {
            slice: entry.name.clone(),
            scan_seeds: block.iter().map(|(seed, _, _)| *seed).collect(),
            methods: per_method,
        });
    }
    let summary: BTreeMap<String, BiasVariance> = methods
        .iter()
        .map(|m| {
            let n = details.len() as f64;
            let bias = details.iter().map(|d| d.methods[m.name()].bias).sum::<f64>() / n;
            let variance = details.iter().map(|d| d.methods[m.name()].variance).sum::<f64>() / n;
            (m.name().to_string(), BiasVariance { bias, variance })
        })
        .collect();
    run.lap("metrics");

    fs::create_dir_all(out)?;
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    write_json(&out.join(DETAILS_FILE), &details)?;
    run.finish(out, vec![SUMMARY_FILE.into(), DETAILS_FILE.into()])?;
    Ok(summary)
}
