use serde::{Deserialize, Serialize};

use super::vocab;
use crate::error::{invalid, Result};

/// Drafting-network sizing.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KvpsnConfig {
    /// Number of blocks, one per decoder layer group.
    pub n_groups: usize,
    /// Reuse the token embedding as the output projection.
    pub tie_output: bool,
}

impl Default for KvpsnConfig {
    fn default() -> Self {
        Self {
            n_groups: 3,
            tie_output: true,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Decoder depth.
    pub n_layers: usize,
    pub n_enc_speech: usize,
    pub n_enc_text: usize,
    pub d_feat: usize,
    pub v_content: usize,
    pub max_len: usize,
    /// `None` builds a model without a drafting network.
    pub kvpsn: Option<KvpsnConfig>,
    /// Transformer blocks in the Medusa-style baseline head (0 = none).
    pub medusa_blocks: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            n_layers: 12,
            n_enc_speech: 2,
            n_enc_text: 2,
            d_feat: 16,
            v_content: 64,
            max_len: 64,
            kvpsn: Some(KvpsnConfig::default()),
            medusa_blocks: 3,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for tests and self-checks.
    pub fn tiny() -> Self {
        Self {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            n_layers: 6,
            n_enc_speech: 1,
            n_enc_text: 1,
            d_feat: 8,
            v_content: 16,
            max_len: 32,
            kvpsn: Some(KvpsnConfig {
                n_groups: 2,
                tie_output: true,
            }),
            medusa_blocks: 2,
        }
    }

    pub fn vocab_size(&self) -> usize {
        vocab::vocab_size(self.v_content)
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_groups(&self) -> usize {
        self.kvpsn.map_or(0, |k| k.n_groups)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.n_layers < 2 {
            return invalid(format!("decoder needs at least 2 layers, got {}", self.n_layers));
        }
        if self.max_len < 3 {
            return invalid("max_len must leave room for the prompt and one token");
        }
        if self.d_ff == 0 || self.d_feat == 0 || self.v_content == 0 {
            return invalid("d_ff, d_feat and v_content must be positive");
        }
        if let Some(k) = self.kvpsn {
            crate::kvpsn::group_layers(self.n_layers, k.n_groups)?;
        }
        Ok(())
    }
}
