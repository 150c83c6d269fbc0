use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::encoder::tokenizer::SPECIAL_TOKENS;

/// Attention pattern inside the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    Causal,
    Bidirectional,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal" => Ok(MaskMode::Causal),
            "bidirectional" => Ok(MaskMode::Bidirectional),
            other => Err(Error::Config(format!("unknown mask mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Causal => "causal",
            MaskMode::Bidirectional => "bidirectional",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub mask_mode: MaskMode,
    pub layer_norm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256 + SPECIAL_TOKENS,
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            d_ff: 128,
            max_len: 64,
            mask_mode: MaskMode::Bidirectional,
            layer_norm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 256 + SPECIAL_TOKENS {
            return Err(Error::Config(format!(
                "vocab_size {} cannot hold 256 bytes plus {SPECIAL_TOKENS} special tokens",
                self.vocab_size
            )));
        }
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(Error::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 {
            return Err(Error::Config("max_len must leave room for BOS and EOS".into()));
        }
        if !(self.layer_norm_eps > 0.0) {
            return Err(Error::Config("layer_norm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}
