use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compute precision tag stored alongside a model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn tag(self) -> u8 {
        match self {
            Precision::F32 => 0,
            Precision::F64 => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Precision::F32),
            1 => Some(Precision::F64),
            _ => None,
        }
    }
}

/// Shape and seed of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    /// Width of the residual stream.
    pub embed_dim: usize,
    /// Rows of each layer's state matrix.
    pub state_dim: usize,
    pub num_layers: usize,
    pub rng_seed: u64,
    pub precision: Precision,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, embed_dim: usize, state_dim: usize, num_layers: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim,
            state_dim,
            num_layers,
            rng_seed: 0,
            precision: Precision::F64,
        }
    }

    pub fn with_seed(mut self, rng_seed: u64) -> Self {
        self.rng_seed = rng_seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::input(format!(
                "vocab_size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.state_dim == 0 || self.num_layers == 0 {
            return Err(Error::input(
                "embed_dim, state_dim and num_layers must all be at least 1",
            ));
        }
        Ok(())
    }

    /// Number of scalars in one layer's state matrix.
    pub fn state_len(&self) -> usize {
        self.state_dim * self.embed_dim
    }
}

impl Default for ModelConfig {
    /// Toy scale used by the harness.
    fn default() -> Self {
        ModelConfig::new(200, 32, 16, 4)
    }
}
