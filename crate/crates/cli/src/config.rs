use std::fs;
use std::path::Path;

use petrecon::phantom::{PhantomSpec, ScanSpec};
use petrecon::projector::{GridSpec, SinogramSpec};
use petrecon::regularizer::{Architecture, RegularizerParams, DEFAULT_ALPHA, DEFAULT_BETA, DEFAULT_DELTA};
use petrecon::solvers::{BASELINE_ITERATIONS, DEFAULT_TV_PENALTY};
use petrecon::trainer::{LossMode, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::{Failure, Outcome};

/// Every setting of a pipeline run. Missing fields take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; every per-slice seed is derived from it.
    pub seed: u64,
    pub grid: GridSpec,
    pub sinogram: SinogramSpec,
    /// Template for every phantom; its `seed` is replaced per slice.
    pub phantom: PhantomSpec,
    /// Count level and randoms; its `seed` is replaced per slice.
    pub scan: ScanSpec,
    pub dataset: DatasetConfig,
    pub init: InitConfig,
    pub train: TrainConfig,
    pub recon: ReconConfig,
    pub bias_variance: BiasVarianceConfig,
    pub ablation: AblationConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            grid: GridSpec { n_pixels_per_side: 64, pixel_size: 1.0 },
            sinogram: SinogramSpec { n_angles: 90, n_bins: 96, bin_width: 1.0 },
            phantom: PhantomSpec::default(),
            scan: ScanSpec::default(),
            dataset: DatasetConfig::default(),
            init: InitConfig::default(),
            train: TrainConfig::default(),
            recon: ReconConfig::default(),
            bias_variance: BiasVarianceConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { n_train: 24, n_val: 4, n_test: 8 }
    }
}

/// Initial regularizer parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitConfig {
    pub architecture: Architecture,
    pub delta: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self { architecture: Architecture::default(), delta: DEFAULT_DELTA, alpha: DEFAULT_ALPHA, beta: DEFAULT_BETA }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconConfig {
    pub mlem_iterations: usize,
    pub emtv_iterations: usize,
    pub emtv_penalty: f64,
    /// Initial fill of the baselines; the learned reconstructor uses `train.lda.x0_value`.
    pub x0_value: f64,
}

impl Default for ReconConfig {
    fn default() -> Self {
        Self {
            mlem_iterations: BASELINE_ITERATIONS,
            emtv_iterations: BASELINE_ITERATIONS,
            emtv_penalty: DEFAULT_TV_PENALTY,
            x0_value: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BiasVarianceConfig {
    pub realizations: usize,
    /// Test slices used; all of them when larger than the test split.
    pub slices: usize,
}

impl Default for BiasVarianceConfig {
    fn default() -> Self {
        Self { realizations: 5, slices: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub phases: Vec<usize>,
    pub loss_modes: Vec<LossMode>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self { phases: vec![2, 4, 6, 8, 10], loss_modes: LossMode::ALL.to_vec() }
    }
}

impl PipelineConfig {
    /// Defaults when `path` is `None`.
    pub fn load(path: Option<&Path>) -> Outcome<Self> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Failure::config(format!("invalid config {}: {e}", path.display())))
    }

    pub fn validate(&self) -> Outcome<()> {
        let check = |r: petrecon::Result<()>| r.map_err(|e| Failure::config(e.to_string()));
        check(self.grid.validate())?;
        check(self.sinogram.validate())?;
        check(self.phantom.validate())?;
        check(self.scan.validate())?;
        check(self.train.validate())?;
        check(self.theta0(self.train.lda.phases).map(|_| ()))?;
        let d = &self.dataset;
        if d.n_train + d.n_val + d.n_test == 0 {
            return Err(Failure::config("dataset has zero samples"));
        }
        let r = &self.recon;
        if r.mlem_iterations == 0 || r.emtv_iterations == 0 {
            return Err(Failure::config("baseline iteration counts must be positive"));
        }
        if !(r.emtv_penalty >= 0.0 && r.emtv_penalty.is_finite()) {
            return Err(Failure::config(format!("EM-TV penalty must be >= 0, got {}", r.emtv_penalty)));
        }
        if !(r.x0_value > 0.0 && r.x0_value.is_finite()) {
            return Err(Failure::config(format!("baseline start value must be > 0, got {}", r.x0_value)));
        }
        if self.bias_variance.realizations < 2 {
            return Err(Failure::config("bias/variance needs at least two realizations"));
        }
        if self.ablation.phases.contains(&0) || self.ablation.loss_modes.is_empty() {
            return Err(Failure::config("ablation needs positive phase counts and at least one loss mode"));
        }
        Ok(())
    }

    /// Initial parameters for `phases` phases; kernels depend only on the root seed.
    pub fn theta0(&self, phases: usize) -> petrecon::Result<RegularizerParams> {
        let i = &self.init;
        RegularizerParams::init(&i.architecture, phases, i.delta, i.alpha, i.beta, derive_seed(self.seed, SeedTag::Init, 0))
    }
}

#[derive(Clone, Copy, Debug)]
pub enum SeedTag {
    Phantom = 1,
    Scan = 2,
    Init = 3,
    Realization = 4,
}

/// Seed for one `(tag, index)` under the root seed, via the splitmix64 finalizer.
pub fn derive_seed(root: u64, tag: SeedTag, index: u64) -> u64 {
    let mut z = root
        .wrapping_add((tag as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_round_trip() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"seed": 9, "dataset": {"n_train": 2}}"#).unwrap();
        assert_eq!(partial.seed, 9);
        assert_eq!(partial.dataset.n_train, 2);
        assert_eq!(partial.dataset.n_test, 8);
    }

    #[test]
    fn unknown_fields_and_bad_values_fail() {
        assert!(serde_json::from_str::<PipelineConfig>(r#"{"sed": 1}"#).is_err());
        let mut c = PipelineConfig::default();
        c.dataset = DatasetConfig { n_train: 0, n_val: 0, n_test: 0 };
        assert_eq!(c.validate().unwrap_err().code, crate::EXIT_CONFIG);
        let mut c = PipelineConfig::default();
        c.scan.randoms_fraction = 1.5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn derived_seeds_separate_tags_and_indices() {
        let a = derive_seed(0, SeedTag::Phantom, 0);
        assert_ne!(a, derive_seed(0, SeedTag::Scan, 0));
        assert_ne!(a, derive_seed(0, SeedTag::Phantom, 1));
        assert_ne!(a, derive_seed(1, SeedTag::Phantom, 0));
        assert_eq!(a, derive_seed(0, SeedTag::Phantom, 0));
    }
}
