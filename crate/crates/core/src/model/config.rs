use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tokenizer::VOCAB_SIZE;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FfnStyle {
    /// `silu(x W_in + b_in) W_out + b_out`
    TwoMatrix,
    /// `(silu(x W_gate) * (x W_up)) W_down`
    GatedThreeMatrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Key/value heads; query heads are grouped evenly over them.
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub total_experts: usize,
    pub active_experts: usize,
    pub ffn_style: FfnStyle,
    /// Output projection shares the token embedding table.
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// The 8-Top2 topology at toy width, sized to train on a laptop CPU.
    pub fn desk() -> Self {
        Self {
            n_layers: 4,
            d_model: 64,
            n_heads: 4,
            n_kv_heads: 4,
            d_ff: 128,
            vocab_size: VOCAB_SIZE,
            max_seq_len: 256,
            total_experts: 8,
            active_experts: 2,
            ffn_style: FfnStyle::GatedThreeMatrix,
            tie_embeddings: false,
        }
    }

    /// Shape of a LLaMA-3.2-3B base (grouped-query attention with 8 KV
    /// heads, tied embeddings, 2048-token context) with 8 experts, top-2.
    /// Only used for parameter accounting.
    pub fn llama_3b_like() -> Self {
        Self {
            n_layers: 28,
            d_model: 3072,
            n_heads: 24,
            n_kv_heads: 8,
            d_ff: 8192,
            vocab_size: 128_256,
            max_seq_len: 2048,
            total_experts: 8,
            active_experts: 2,
            ffn_style: FfnStyle::GatedThreeMatrix,
            tie_embeddings: true,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "llama-3b-like" => Ok(Self::llama_3b_like()),
            other => Err(Error::Config(format!(
                "unknown model preset `{other}` (expected `desk` or `llama-3b-like`)"
            ))),
        }
    }

    pub fn with_experts(mut self, total: usize, active: usize) -> Self {
        self.total_experts = total;
        self.active_experts = active;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("total_experts", self.total_experts),
            ("active_experts", self.active_experts),
        ];
        if let Some((name, _)) = sizes.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "n_heads {} is not a multiple of n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.active_experts > self.total_experts {
            return Err(Error::Config(format!(
                "active_experts {} exceeds total_experts {}",
                self.active_experts, self.total_experts
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        ModelConfig::desk().validate().unwrap();
        ModelConfig::llama_3b_like().validate().unwrap();
        assert!(ModelConfig::preset("nope").is_err());
    }

    #[test]
    fn rejects_bad_shapes() {
        let mut c = ModelConfig::desk();
        c.active_experts = 9;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.d_model = 65;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.n_kv_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk();
        c.d_ff = 0;
        assert!(c.validate().is_err());
    }
}
