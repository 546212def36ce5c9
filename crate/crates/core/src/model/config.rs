use serde::{Deserialize, Serialize};

use crate::corpus::DEFAULT_MAX_LEN;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Patch feature dimension of the vision input.
    pub d_in: usize,
    /// Patches per image (N).
    pub patches: usize,
    pub d_model: usize,
    /// Shared embedding dimension of both towers and of the KER head.
    pub d_out: usize,
    /// Transformer blocks per tower (L).
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Longest token sequence, including `[SOS]` and `[EOS]`.
    pub max_len: usize,
    /// Filled in from the vocabulary at training time.
    pub vocab_size: usize,
    /// Transformer blocks after the KER cross-attention.
    pub ker_blocks: usize,
    pub ker_heads: usize,
    pub init_std: f64,
    pub ln_eps: f64,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 16,
            patches: 16,
            d_model: 64,
            d_out: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 4,
            max_len: DEFAULT_MAX_LEN,
            vocab_size: 0,
            ker_blocks: 4,
            ker_heads: 4,
            init_std: 0.02,
            ln_eps: 1e-5,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.d_in == 0 || self.patches == 0 || self.d_model == 0 || self.d_out == 0 {
            return bad("model dimensions must be positive");
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.ker_heads == 0 || !self.d_out.is_multiple_of(self.ker_heads) {
            return bad("d_out must be divisible by ker_heads");
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be positive");
        }
        if self.max_len < 3 {
            return bad("max_len must leave room for at least one word");
        }
        if self.vocab_size < 6 {
            return bad("vocab_size must cover the special tokens and one word");
        }
        if !(self.init_temperature > 0.0) || !(self.ln_eps > 0.0) || !(self.init_std >= 0.0) {
            return bad("init_temperature and ln_eps must be positive, init_std non-negative");
        }
        Ok(())
    }
}
