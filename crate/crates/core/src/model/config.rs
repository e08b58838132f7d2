//! Encoder hyper-parameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Transformer encoder dimensions. Desk-scale defaults keep a CPU
/// training run in the minutes range while leaving room for per-layer
/// trends.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_layers: 4,
            num_heads: 4,
            hidden_dim: 64,
            ffn_dim: 128,
            vocab_size: 256,
            max_seq_len: 128,
            dropout_rate: 0.0,
        }
    }
}

impl ModelConfig {
    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.hidden_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} must be divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if self.vocab_size < 4 {
            return Err(Error::Config(
                "vocab_size must cover the special tokens".into(),
            ));
        }
        if self.max_seq_len == 0 {
            return Err(Error::Config("max_seq_len must be positive".into()));
        }
        if self.dropout_rate != 0.0 {
            return Err(Error::Config(
                "dropout is fixed at 0 for deterministic runs".into(),
            ));
        }
        Ok(())
    }
}
