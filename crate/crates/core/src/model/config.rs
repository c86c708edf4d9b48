use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::vocab::FieldLayout;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// Learned positional embeddings, pre-LayerNorm blocks, GELU MLP.
    #[serde(rename = "decoder-absolute")]
    DecoderAbsolute,
    /// RMSNorm, rotary position encoding, gated SiLU MLP, no biases.
    #[serde(rename = "decoder-rotary")]
    DecoderRotary,
}

impl std::str::FromStr for Arch {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "decoder-absolute" | "gpt2" => Ok(Arch::DecoderAbsolute),
            "decoder-rotary" | "llama" => Ok(Arch::DecoderRotary),
            _ => Err(format!("unknown architecture `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub arch: Arch,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    /// Maximum tokens per forward pass.
    pub context_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

/// Full-size presets: `(name, alias, arch, layers, heads, d_model, d_ff)`.
const PRESETS: &[(&str, &str, Arch, usize, usize, usize, usize)] = &[
    ("gpt2-25.3M", "gpt2-3layer", Arch::DecoderAbsolute, 3, 6, 768, 3072),
    ("gpt2-46.5M", "gpt2-6layer", Arch::DecoderAbsolute, 6, 6, 768, 3072),
    ("gpt2-89.0M", "gpt2-12layer", Arch::DecoderAbsolute, 12, 6, 768, 3072),
    ("gpt2-131.6M", "gpt2-18layer", Arch::DecoderAbsolute, 18, 6, 768, 3072),
    ("llama-58.1M", "llama-3layer", Arch::DecoderRotary, 3, 32, 512, 11008),
    ("llama-112.0M", "llama-6layer", Arch::DecoderRotary, 6, 32, 512, 11008),
    ("llama-219.8M", "llama-12layer", Arch::DecoderRotary, 12, 32, 512, 11008),
];

pub const DEFAULT_CONTEXT_LEN: usize = 1024;

impl ModelConfig {
    pub fn preset_names() -> Vec<&'static str> {
        PRESETS.iter().flat_map(|p| [p.0, p.1]).collect()
    }

    pub fn preset(name: &str, vocab_size: usize) -> Result<Self, ModelError> {
        let p = PRESETS
            .iter()
            .find(|p| p.0 == name || p.1 == name)
            .ok_or_else(|| ModelError::Config(format!("unknown preset `{name}`")))?;
        let config = Self {
            arch: p.2,
            n_layers: p.3,
            n_heads: p.4,
            d_model: p.5,
            d_ff: p.6,
            context_len: DEFAULT_CONTEXT_LEN,
            vocab_size,
            seed: 0,
        };
        config.validate()?;
        Ok(config)
    }

    /// Same architecture family with a different width; `d_ff` follows the
    /// family's ratio (4x for absolute, 8/3x rounded to 8 for rotary).
    pub fn with_width(mut self, d_model: usize, n_heads: usize) -> Self {
        self.d_model = d_model;
        self.n_heads = n_heads;
        self.d_ff = match self.arch {
            Arch::DecoderAbsolute => 4 * d_model,
            Arch::DecoderRotary => (8 * d_model / 3).div_ceil(8) * 8,
        };
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    /// Complete rows that fit in the context after BOS.
    pub fn max_rows(&self) -> usize {
        (self.context_len - 1) / 3
    }

    pub fn layout(&self) -> FieldLayout {
        FieldLayout::from_vocab_size(self.vocab_size).expect("validated vocab size")
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |m: String| Err(ModelError::Config(m));
        if self.n_layers == 0 {
            return err("n_layers must be at least 1".into());
        }
        if self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return err(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.arch == Arch::DecoderRotary && !self.head_dim().is_multiple_of(2) {
            return err(format!("rotary encoding needs an even head dim, got {}", self.head_dim()));
        }
        if self.d_ff == 0 {
            return err("d_ff must be positive".into());
        }
        if self.context_len < 4 {
            return err(format!("context_len must be at least 4, got {}", self.context_len));
        }
        match FieldLayout::from_vocab_size(self.vocab_size) {
            Some(l) if l.metric_count >= 1 => Ok(()),
            _ => err(format!("vocab_size {} leaves no metric-name tokens", self.vocab_size)),
        }
    }
}
