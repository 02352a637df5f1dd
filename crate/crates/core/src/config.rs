//! Declarative run configuration (flat TOML `key = value` files).

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CmtaError, Result};
use crate::head::AblationVariant;
use crate::model::ModelConfig;
use crate::parallel::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValMetric {
    #[default]
    Auc,
    Acc,
    /// Validation BCE; the scheduler maximizes its negation.
    Loss,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_factor: f64,
    pub lr_patience: u32,
    pub lr_threshold: f64,
    pub clip_len: usize,
    pub hidden: usize,
    pub model_dim: usize,
    /// Feed-forward width; 0 means `4 · model_dim`.
    pub ff_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    pub variant: AblationVariant,
    pub seed: u64,
    pub val_metric: ValMetric,
    /// Keep one fixed window per video instead of resampling every epoch.
    pub freeze_clips: bool,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            batch_size: 256,
            lr: 1e-4,
            lr_factor: 0.5,
            lr_patience: 5,
            lr_threshold: 1e-4,
            clip_len: 8,
            hidden: 256,
            model_dim: 256,
            ff_dim: 0,
            layers: 2,
            heads: 4,
            dropout: 0.0,
            variant: AblationVariant::Full,
            seed: 0,
            val_metric: ValMetric::Auc,
            freeze_clips: false,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("clip_len", self.clip_len),
            ("hidden", self.hidden),
            ("model_dim", self.model_dim),
            ("heads", self.heads),
            ("lr_patience", self.lr_patience as usize),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(CmtaError::config(format!("`{k}` must be positive")));
        }
        if !(self.lr > 0.0) {
            return Err(CmtaError::config("`lr` must be positive"));
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err(CmtaError::config("`lr_factor` must lie in (0, 1)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(CmtaError::config("`dropout` must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn ff_width(&self) -> usize {
        if self.ff_dim == 0 {
            4 * self.model_dim
        } else {
            self.ff_dim
        }
    }

    pub fn model_config(&self, d_v: usize, d_e: usize) -> ModelConfig {
        ModelConfig {
            d_v,
            d_e,
            clip_len: self.clip_len,
            hidden: self.hidden,
            model_dim: self.model_dim,
            ff_dim: self.ff_width(),
            layers: self.layers,
            heads: self.heads,
            variant: self.variant,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    /// Embedding width (shared by both modalities).
    pub dim: usize,
    pub frames: usize,
    /// Clips generated per class.
    pub n_clips: usize,
    /// Base alignment the similarity trajectory wanders around.
    pub mu: f64,
    pub a_real: f64,
    pub a_fake: f64,
    /// Standard deviation of isotropic noise added to textual vectors.
    pub noise: f64,
    pub seed: u64,
    pub subset: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            dim: 16,
            frames: 8,
            n_clips: 2000,
            mu: 0.3,
            a_real: 0.25,
            a_fake: 0.02,
            noise: 0.01,
            seed: 0,
            subset: "synthetic".into(),
        }
    }
}

impl SynthConfig {
    /// `0 ≤ a_fake ≤ a_real ≤ 1 − |μ|`, `dim ≥ 2`. Equal amplitudes are
    /// allowed so that a null control can be generated.
    pub fn validate(&self) -> Result<()> {
        if self.dim < 2 {
            return Err(CmtaError::config("`dim` must be at least 2"));
        }
        if self.frames == 0 || self.n_clips == 0 {
            return Err(CmtaError::config("`frames` and `n_clips` must be positive"));
        }
        if !(self.mu.abs() < 1.0) {
            return Err(CmtaError::config("`mu` must lie in (-1, 1)"));
        }
        if !(0.0 <= self.a_fake && self.a_fake <= self.a_real && self.a_real <= 1.0 - self.mu.abs() + 1e-12) {
            return Err(CmtaError::config(format!(
                "need 0 <= a_fake <= a_real <= 1 - |mu| (a_fake={}, a_real={}, mu={})",
                self.a_fake, self.a_real, self.mu
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(CmtaError::config("`noise` must be non-negative"));
        }
        Ok(())
    }
}

pub fn to_toml<T: Serialize>(cfg: &T) -> Result<String> {
    toml::to_string(cfg).map_err(|e| CmtaError::config(e.to_string()))
}

pub fn from_toml<T: DeserializeOwned>(text: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| CmtaError::config(e.message().to_string()))
}

pub fn load<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| CmtaError::io(path, e))?;
    toml::from_str(&text).map_err(|e| CmtaError::config(format!("{}: {}", path.display(), e.message())))
}

/// Applies `key=value` overrides. Values parse as TOML scalars, falling back to
/// a bare string; unknown keys are rejected.
pub fn apply_overrides<T: Serialize + DeserializeOwned>(cfg: &T, overrides: &[String]) -> Result<T> {
    let mut table: toml::Table = toml::from_str(&to_toml(cfg)?).map_err(|e| CmtaError::config(e.to_string()))?;
    for kv in overrides {
        let (key, raw) = kv
            .split_once('=')
            .ok_or_else(|| CmtaError::config(format!("override `{kv}` is not key=value")))?;
        let (key, raw) = (key.trim(), raw.trim());
        let value = format!("v = {raw}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
        table.insert(key.to_string(), value);
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CmtaError::config(e.message().to_string()))
}

/// SHA-256 of a serialized configuration.
pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}
