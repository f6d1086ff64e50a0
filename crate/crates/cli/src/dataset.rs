use std::fs;
use std::path::{Path, PathBuf};

use petrecon::metrics::RoiSpec;
use petrecon::phantom::{count_scale, make_phantom, make_roi, simulate_scan, PhantomSpec, ScanSpec};
use petrecon::projector::SystemModel;
use petrecon::trainer::TrainSample;
use petrecon::{Image, Sinogram};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{derive_seed, SeedTag};
use crate::manifest::RunRecorder;
use crate::{build_model, require_dir, write_json, Failure, Outcome, PipelineConfig};

pub const DATASET_FORMAT: &str = "petrecon-dataset-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceEntry {
    pub name: String,
    pub split: Split,
    pub phantom_seed: u64,
    pub scan_seed: u64,
    /// Factor from phantom units to the count units stored in the truth file.
    pub count_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub config: PipelineConfig,
    pub slices: Vec<SliceEntry>,
}

/// One simulated slice before it is written.
pub struct SimulatedSlice {
    pub entry: SliceEntry,
    pub truth: Image,
    pub roi: RoiSpec,
    pub y: Sinogram,
    pub b: Sinogram,
}

pub fn truth_file(name: &str) -> String {
    format!("{name}.truth.tensor")
}

pub fn sinogram_file(name: &str) -> String {
    format!("{name}.sino.tensor")
}

pub fn randoms_file(name: &str) -> String {
    format!("{name}.randoms.tensor")
}

pub fn roi_file(name: &str) -> String {
    format!("{name}.roi.json")
}

/// Phantom, ROI and one noisy scan for a slice; the truth is returned in count units.
pub fn simulate_slice(
    cfg: &PipelineConfig,
    model: &SystemModel,
    phantom_seed: u64,
    scan_seed: u64,
) -> petrecon::Result<(Image, RoiSpec, f64, Sinogram, Sinogram)> {
    let spec = PhantomSpec { seed: phantom_seed, ..cfg.phantom.clone() };
    let x = make_phantom(&spec, model.grid())?;
    let roi = make_roi(&spec, model.grid())?;
    let scan = ScanSpec { seed: scan_seed, ..cfg.scan.clone() };
    let c = count_scale(&x, model, &scan)?;
    let (y, b) = simulate_scan(&x, model, &scan)?;
    Ok((x.map(|v| c * v), roi, c, y, b))
}

fn plan(cfg: &PipelineConfig) -> Vec<(String, Split, u64)> {
    let d = &cfg.dataset;
    let mut out = Vec::new();
    let mut index = 0u64;
    for (split, n) in [(Split::Train, d.n_train), (Split::Val, d.n_val), (Split::Test, d.n_test)] {
        for i in 0..n {
            out.push((format!("{}_{i:03}", split.name()), split, index));
            index += 1;
        }
    }
    out
}

/// Simulates every slice of the configured splits, in order.
pub fn simulate_all(cfg: &PipelineConfig, model: &SystemModel) -> Outcome<Vec<SimulatedSlice>> {
    plan(cfg)
        .into_par_iter()
        .map(|(name, split, index)| {
            let phantom_seed = derive_seed(cfg.seed, SeedTag::Phantom, index);
            let scan_seed = derive_seed(cfg.seed, SeedTag::Scan, index);
            let (truth, roi, count_scale, y, b) = simulate_slice(cfg, model, phantom_seed, scan_seed)
                .map_err(|e| Failure::config(format!("slice {name}: {e}")))?;
            let entry = SliceEntry { name, split, phantom_seed, scan_seed, count_scale };
            Ok(SimulatedSlice { entry, truth, roi, y, b })
        })
        .collect()
}

/// Writes phantoms (count units), sinograms, randoms, ROIs and the split manifest to `out`.
pub fn cmd_simulate(cfg: &PipelineConfig, config_path: Option<&Path>, out: &Path) -> Outcome<DatasetManifest> {
    cfg.validate()?;
    let mut run = RunRecorder::start("simulate", config_path, cfg.seed);
    let model = build_model(cfg)?;
    run.lap("system_model");
    let slices = simulate_all(cfg, &model)?;
    run.lap("simulate");

    fs::create_dir_all(out)?;
    let mut artifacts = vec![MANIFEST_FILE.to_string()];
    for s in &slices {
        let name = &s.entry.name;
        let seed = Some(s.entry.scan_seed);
        s.truth.save(&out.join(truth_file(name)), "truth", Some(s.entry.phantom_seed))?;
        s.y.save(&out.join(sinogram_file(name)), "sinogram", seed)?;
        s.b.save(&out.join(randoms_file(name)), "randoms", seed)?;
        write_json(&out.join(roi_file(name)), &s.roi)?;
        artifacts.extend([truth_file(name), sinogram_file(name), randoms_file(name), roi_file(name)]);
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        config: cfg.clone(),
        slices: slices.into_iter().map(|s| s.entry).collect(),
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    run.lap("write");
    run.finish(out, artifacts)?;
    Ok(manifest)
}

/// A simulated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    /// Missing or unreadable datasets are configuration errors.
    pub fn open(dir: &Path) -> Outcome<Self> {
        require_dir(dir, "dataset")?;
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path)
            .map_err(|e| Failure::config(format!("cannot read {}: {e}", path.display())))?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid {}: {e}", path.display())))?;
        if manifest.format != DATASET_FORMAT {
            return Err(Failure::config(format!("unknown dataset format {}", manifest.format)));
        }
        Ok(Self { dir: dir.to_path_buf(), manifest })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.manifest.config
    }

    pub fn slices(&self, split: Split) -> Vec<&SliceEntry> {
        self.manifest.slices.iter().filter(|s| s.split == split).collect()
    }

    pub fn sample(&self, entry: &SliceEntry) -> Outcome<TrainSample> {
        let y = Sinogram::load(&self.dir.join(sinogram_file(&entry.name)))?;
        let b = Sinogram::load(&self.dir.join(randoms_file(&entry.name)))?;
        Ok(TrainSample { y, b })
    }

    pub fn samples(&self, split: Split) -> Outcome<Vec<TrainSample>> {
        self.slices(split).into_iter().map(|e| self.sample(e)).collect()
    }

    pub fn truth(&self, entry: &SliceEntry) -> Outcome<Image> {
        Ok(Image::load(&self.dir.join(truth_file(&entry.name)))?)
    }

    pub fn roi(&self, entry: &SliceEntry) -> Outcome<RoiSpec> {
        let text = fs::read_to_string(self.dir.join(roi_file(&entry.name)))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Parses a split name as accepted on the command line.
pub fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(format!("unknown split {other:?}; expected train, val or test")),
    }
}
