use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::gradcore::{Gradients, Tape, Tensor, Var};
use crate::{Error, Result};

/// Convolutional feature-extractor weights plus per-phase step sizes (log domain).
#[derive(Clone, Debug, PartialEq)]
pub struct RegularizerParams {
    /// `(out, in, k, k)` kernels, first layer takes one channel; no bias terms.
    pub kernels: Vec<Tensor>,
    /// Smoothed-ReLU half-width.
    pub delta: f64,
    pub log_alpha: Vec<f64>,
    pub log_beta: Vec<f64>,
}

/// Layer widths and kernel extent of the feature extractor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    /// Channel counts from input to output, e.g. `[1, 8, 8, 8]` for three layers.
    pub channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self { channels: vec![1, 8, 8, 8], kernel_size: 3 }
    }
}

pub const DEFAULT_DELTA: f64 = 0.002;
pub const DEFAULT_ALPHA: f64 = 0.01;
pub const DEFAULT_BETA: f64 = 0.02;

impl RegularizerParams {
    /// Uniform kernels in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` from `seed`, step sizes
    /// at `alpha`/`beta` for every phase.
    pub fn init(
        arch: &Architecture,
        phases: usize,
        delta: f64,
        alpha: f64,
        beta: f64,
        seed: u64,
    ) -> Result<Self> {
        if arch.channels.len() < 2 || arch.channels[0] != 1 {
            return Err(Error::InvalidSpec(format!(
                "channel list must start at 1 and have at least one layer, got {:?}",
                arch.channels
            )));
        }
        let k = arch.kernel_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kernels = arch
            .channels
            .windows(2)
            .map(|w| {
                let (c_in, c_out) = (w[0], w[1]);
                let bound = 1.0 / ((c_in * k * k) as f64).sqrt();
                let data = (0..c_out * c_in * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
                Tensor::new(vec![c_out, c_in, k, k], data)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let p = Self {
            kernels,
            delta,
            log_alpha: vec![alpha.ln(); phases],
            log_beta: vec![beta.ln(); phases],
        };
        p.validate()?;
        Ok(p)
    }

    /// Default architecture, `delta = 0.002`, `alpha = 0.01`, `beta = 0.02`.
    pub fn default_init(phases: usize, seed: u64) -> Result<Self> {
        Self::init(&Architecture::default(), phases, DEFAULT_DELTA, DEFAULT_ALPHA, DEFAULT_BETA, seed)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpec(m));
        if self.kernels.is_empty() {
            return bad("regularizer needs at least one layer".into());
        }
        let mut c_prev = 1;
        for (l, k) in self.kernels.iter().enumerate() {
            let s = k.shape();
            if s.len() != 4 || s[1] != c_prev || s[2] % 2 == 0 || s[3] % 2 == 0 {
                return bad(format!("layer {l} kernel shape {s:?} is not (out, {c_prev}, odd, odd)"));
            }
            if !k.all_finite() {
                return bad(format!("layer {l} kernel has non-finite entries"));
            }
            c_prev = s[0];
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return bad(format!("delta must be > 0, got {}", self.delta));
        }
        if self.log_alpha.is_empty() || self.log_alpha.len() != self.log_beta.len() {
            return bad("need the same positive number of alpha and beta phases".into());
        }
        if self.log_alpha.iter().chain(&self.log_beta).any(|v| !v.is_finite()) {
            return bad("step sizes must be finite".into());
        }
        Ok(())
    }

    pub fn phases(&self) -> usize {
        self.log_alpha.len()
    }

    pub fn alpha(&self, phase: usize) -> f64 {
        self.log_alpha[phase].exp()
    }

    pub fn beta(&self, phase: usize) -> f64 {
        self.log_beta[phase].exp()
    }

    /// Proximal step `alpha beta / (alpha + beta)`.
    pub fn tau(&self, phase: usize) -> f64 {
        let (a, b) = (self.alpha(phase), self.beta(phase));
        a * b / (a + b)
    }

    pub fn feature_channels(&self) -> usize {
        self.kernels.last().map(|k| k.shape()[0]).unwrap_or(0)
    }

    /// Same steps with every kernel zeroed, so that `P` vanishes identically.
    pub fn with_zero_kernels(&self) -> Self {
        let mut p = self.clone();
        for k in &mut p.kernels {
            k.data_mut().fill(0.0);
        }
        p
    }

    /// Copy with `phases` step-size entries; existing entries are kept, new ones
    /// repeat the last learned value.
    pub fn with_phases(&self, phases: usize) -> Self {
        let mut p = self.clone();
        let (la, lb) = (*self.log_alpha.last().unwrap(), *self.log_beta.last().unwrap());
        p.log_alpha.resize(phases, la);
        p.log_beta.resize(phases, lb);
        p
    }

    pub fn n_params(&self) -> usize {
        self.kernels.iter().map(Tensor::len).sum::<usize>() + 2 * self.phases()
    }

    /// Kernels in layer order, then `log_alpha`, then `log_beta`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.n_params());
        for k in &self.kernels {
            v.extend_from_slice(k.data());
        }
        v.extend_from_slice(&self.log_alpha);
        v.extend_from_slice(&self.log_beta);
        v
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.n_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut p = self.clone();
        let mut off = 0;
        for k in &mut p.kernels {
            let n = k.len();
            k.data_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        let k = self.phases();
        p.log_alpha.copy_from_slice(&flat[off..off + k]);
        p.log_beta.copy_from_slice(&flat[off + k..off + 2 * k]);
        Ok(p)
    }

    /// Record every learnable quantity as a leaf on `tape`.
    pub fn register<'t>(&self, tape: &'t Tape) -> ParamVars<'t> {
        ParamVars {
            kernels: self.kernels.iter().map(|k| tape.leaf(k.clone())).collect(),
            log_alpha: self.log_alpha.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect(),
            log_beta: self.log_beta.iter().map(|&v| tape.leaf(Tensor::scalar(v))).collect(),
            delta: self.delta,
        }
    }
}

/// Tape handles for [`RegularizerParams`].
#[derive(Clone, Debug)]
pub struct ParamVars<'t> {
    pub kernels: Vec<Var<'t>>,
    pub log_alpha: Vec<Var<'t>>,
    pub log_beta: Vec<Var<'t>>,
    pub delta: f64,
}

impl ParamVars<'_> {
    /// Flattened gradient in the layout of [`RegularizerParams::flatten`].
    pub fn gradient(&self, grads: &Gradients) -> Vec<f64> {
        let mut v = Vec::new();
        for k in &self.kernels {
            v.extend_from_slice(grads.wrt(*k).data());
        }
        for a in &self.log_alpha {
            v.push(grads.wrt(*a).item());
        }
        for b in &self.log_beta {
            v.push(grads.wrt(*b).item());
        }
        v
    }
}
