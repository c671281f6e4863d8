use serde::{Deserialize, Serialize};

use super::vocab::VOCAB_SIZE;
use crate::error::{Error, Result};

/// Shape of the masked language model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Only the pre-layernorm arrangement is implemented.
    pub pre_layernorm: bool,
    pub ln_eps: f32,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            d_mlp: 256,
            vocab_size: VOCAB_SIZE,
            max_len: 64,
            pre_layernorm: true,
            ln_eps: 1e-5,
        }
    }
}

impl LmConfig {
    /// The six-layer, 320-wide shape of the reference protein model.
    pub fn reference_scale() -> Self {
        Self {
            n_layers: 6,
            d_model: 320,
            n_heads: 20,
            d_mlp: 1280,
            max_len: 1024,
            ..Self::default()
        }
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!(
                "n_layers must be at least 2, got {}",
                self.n_layers
            )));
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.pre_layernorm {
            return Err(Error::Config(
                "post-layernorm transformers are not supported".into(),
            ));
        }
        if self.vocab_size < VOCAB_SIZE || self.max_len == 0 || self.d_mlp == 0 {
            return Err(Error::Config(format!("degenerate config {self:?}")));
        }
        Ok(())
    }
}
