use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved beginning-of-sequence token; conditions the first scored position.
pub const BOS: usize = 0;

/// Architecture hyper-parameters of a [`super::LanguageModel`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Task-model scale: 64 tokens, width 32, two layers, two heads.
    pub fn desk(seed: u64) -> Self {
        Self {
            vocab_size: 64,
            embed_dim: 32,
            num_layers: 2,
            num_heads: 2,
            mlp_hidden: 64,
            max_seq_len: 64,
            seed,
        }
    }

    /// Judge scale: same width (so prompt rows live in a shared space), more depth.
    pub fn judge(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            embed_dim: 32,
            num_layers: 3,
            num_heads: 4,
            mlp_hidden: 96,
            max_seq_len: 64,
            seed,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Config(format!("vocab_size {} < 4", self.vocab_size)));
        }
        if self.num_heads == 0
            || self.embed_dim == 0
            || !self.embed_dim.is_multiple_of(self.num_heads)
        {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be at least 2".into()));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("mlp_hidden must be positive".into()));
        }
        Ok(())
    }
}
