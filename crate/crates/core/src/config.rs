//! The JSON run configuration shared by `train`, `eval` and the sidecar
//! written next to checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::Scheme;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossConfig;
use crate::rerank::SarConfig;
use crate::trainer::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EbaConfig {
    pub enabled: bool,
    pub scheme: Scheme,
    pub drop_ratio: f64,
}

impl Default for EbaConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            scheme: Scheme::Split,
            drop_ratio: 0.01,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eba: EbaConfig,
    /// Weight of the global channel in fused similarities.
    pub alpha: f64,
    /// Weight of the local channel in fused similarities.
    pub beta: f64,
    /// Keywords taken per corpus when no keyword file is supplied.
    pub keywords_k: usize,
    pub sar: SarConfig,
    /// Evaluate with the EMA shadow weights rather than the live ones.
    pub eval_with_ema: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            loss: LossConfig::default(),
            eba: EbaConfig::default(),
            alpha: 0.6,
            beta: 0.4,
            keywords_k: 512,
            sar: SarConfig::default(),
            eval_with_ema: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 16 hex digits of the SHA-256 of the compact JSON encoding.
    pub fn hash(&self) -> Result<String> {
        let bytes = serde_json::to_vec(self)?;
        Ok(hex::encode(&Sha256::digest(&bytes)[..8]))
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.eba.drop_ratio) {
            return Err(Error::Config(format!("drop_ratio {} outside [0,1)", self.eba.drop_ratio)));
        }
        if !(self.loss.mlm_weight >= 0.0) {
            return Err(Error::Config("mlm_weight must be non-negative".into()));
        }
        if self.keywords_k == 0 {
            return Err(Error::Config("keywords_k must be at least 1".into()));
        }
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        self.sar.validate()
    }
}
