//! Run configuration: one TOML file, every field defaulted.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::denoiser::DenoiserConfig;
use crate::diffusion::{build_schedule, TransitionModel, DEFAULT_COSINE_OFFSET};
use crate::error::{Error, Result};
use crate::metrics::{DEFAULT_BITS, DEFAULT_RADIUS};
use crate::sampler::SampleConfig;
use crate::tensor::AdamWConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionConfig {
    pub steps: usize,
    pub cosine_offset: f64,
    /// Added to every class count when estimating the marginals.
    pub marginal_pseudocount: f64,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        Self { steps: 50, cosine_offset: DEFAULT_COSINE_OFFSET, marginal_pseudocount: 1.0 }
    }
}

impl DiffusionConfig {
    pub fn transition_model(&self, marginals: Vec<f64>) -> Result<TransitionModel> {
        TransitionModel::new(build_schedule(self.steps, self.cosine_offset)?, marginals)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm cap per update; 0 disables clipping.
    pub clip_norm: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let o = AdamWConfig::default();
        Self {
            epochs: 20,
            batch_size: 16,
            lr: o.lr,
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
            clip_norm: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub n: usize,
    pub max_atoms: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { n: 500, max_atoms: 7, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FingerprintConfig {
    pub radius: usize,
    pub bits: usize,
}

impl Default for FingerprintConfig {
    fn default() -> Self {
        Self { radius: DEFAULT_RADIUS, bits: DEFAULT_BITS }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub fingerprint: FingerprintConfig,
    pub train: TrainConfig,
    pub sample: SampleConfig,
    pub data: DataConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.fingerprint.bits != self.model.cond_dim {
            return Err(Error::invalid(format!(
                "fingerprint.bits ({}) must equal model.cond_dim ({})",
                self.fingerprint.bits, self.model.cond_dim
            )));
        }
        if self.diffusion.steps == 0 {
            return Err(Error::invalid("diffusion.steps must be positive"));
        }
        if !(self.train.clip_norm >= 0.0) {
            return Err(Error::invalid("train.clip_norm must be non-negative"));
        }
        if self.train.batch_size == 0 {
            return Err(Error::invalid("train.batch_size must be positive"));
        }
        if self.sample.n_candidates == 0 {
            return Err(Error::invalid("sample.n_candidates must be at least 1"));
        }
        if let Some(j) = self.sample.jumps {
            if j == 0 || j > self.diffusion.steps {
                return Err(Error::invalid(format!("sample.jumps must be in 1..={}", self.diffusion.steps)));
            }
        }
        if self.data.max_atoms < 2 {
            return Err(Error::invalid("data.max_atoms must be at least 2"));
        }
        Ok(())
    }

    /// SHA-256 (hex, first 16 digits) of the sections a checkpoint depends
    /// on: model, diffusion and fingerprint.
    pub fn hash(&self) -> String {
        let key = serde_json::json!({
            "model": self.model,
            "diffusion": self.diffusion,
            "fingerprint": self.fingerprint,
        });
        let digest = Sha256::digest(key.to_string().as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}
