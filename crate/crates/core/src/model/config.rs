use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the toy decoder.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 8,
            n_heads: 4,
            d_model: 64,
            vocab_size: crate::vocab::Vocab::default().size(),
            max_seq: 16,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers < 2 {
            return Err(Error::Config(format!("n_layers must be at least 2, got {}", self.n_layers)));
        }
        if self.n_heads < 2 {
            return Err(Error::Config(format!("n_heads must be at least 2, got {}", self.n_heads)));
        }
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size == 0 || self.max_seq == 0 {
            return Err(Error::Config("vocab_size and max_seq must be positive".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn d_hidden(&self) -> usize {
        4 * self.d_model
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid() {
        ModelConfig::default().validate().unwrap();
    }

    #[test]
    fn indivisible_width_rejected() {
        let cfg = ModelConfig {
            d_model: 65,
            n_heads: 4,
            ..ModelConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn too_shallow_rejected() {
        let cfg = ModelConfig {
            n_layers: 1,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
