use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::task::ALPHABET_SIZE;

/// Shape of the decoder-only policy.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            max_seq_len: 48,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0
            || self.n_layers == 0
            || self.d_model == 0
            || self.n_heads == 0
            || self.max_seq_len == 0
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < ALPHABET_SIZE {
            return Err(Error::Config(format!(
                "vocab_size {} smaller than task alphabet {}",
                self.vocab_size, ALPHABET_SIZE
            )));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    /// Number of named parameters: `12 · n_layers + 5`.
    pub fn num_named_params(&self) -> usize {
        12 * self.n_layers + 5
    }
}
