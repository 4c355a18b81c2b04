use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::tokenizer::NUM_SPECIAL;

/// How the two decoders exchange information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CouplingMode {
    /// Two independent decoders over a shared encoder.
    None,
    /// Layer `l` attends to the other decoder's layer-`l` state after
    /// encoder-decoder attention.
    Synchronous,
    /// Layer `l` attends to the other decoder's finished layer-`l-1` output.
    Asynchronous,
}

impl CouplingMode {
    pub const ALL: [CouplingMode; 3] = [CouplingMode::None, CouplingMode::Synchronous, CouplingMode::Asynchronous];

    pub fn short_name(self) -> &'static str {
        match self {
            CouplingMode::None => "none",
            CouplingMode::Synchronous => "sync",
            CouplingMode::Asynchronous => "async",
        }
    }

    pub fn is_coupled(self) -> bool {
        self != CouplingMode::None
    }
}

impl fmt::Display for CouplingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.short_name())
    }
}

impl FromStr for CouplingMode {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "none" => Ok(CouplingMode::None),
            "sync" | "synchronous" => Ok(CouplingMode::Synchronous),
            "async" | "asynchronous" => Ok(CouplingMode::Asynchronous),
            other => Err(ModelError::InvalidConfig(format!("unknown coupling mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_heads: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    pub max_seq_len: usize,
    pub coupling: CouplingMode,
    pub src_vocab: usize,
    pub base_vocab: usize,
    pub mix_vocab: usize,
}

impl ModelConfig {
    /// Full-size configuration matching a BERT-base encoder.
    pub fn base() -> Self {
        Self {
            num_layers: 12,
            hidden_dim: 768,
            num_heads: 12,
            ffn_dim: 3072,
            dropout: 0.1,
            max_seq_len: 512,
            coupling: CouplingMode::Synchronous,
            src_vocab: 32_000,
            base_vocab: 32_000,
            mix_vocab: 32_000,
        }
    }

    /// Two layers, width 16, two heads. Used for correctness checks.
    pub fn tiny(vocab: usize) -> Self {
        Self {
            num_layers: 2,
            hidden_dim: 16,
            num_heads: 2,
            ffn_dim: 32,
            dropout: 0.0,
            max_seq_len: 128,
            coupling: CouplingMode::Synchronous,
            src_vocab: vocab,
            base_vocab: vocab,
            mix_vocab: vocab,
        }
    }

    pub fn with_coupling(mut self, coupling: CouplingMode) -> Self {
        self.coupling = coupling;
        self
    }

    /// Sets all three vocabulary sizes (one shared tokenizer).
    pub fn with_vocab(mut self, vocab: usize) -> Self {
        self.src_vocab = vocab;
        self.base_vocab = vocab;
        self.mix_vocab = vocab;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |m: String| Err(ModelError::InvalidConfig(m));
        if self.num_layers == 0 || self.hidden_dim == 0 || self.num_heads == 0 || self.ffn_dim == 0 {
            return fail("layers, hidden_dim, num_heads and ffn_dim must be positive".into());
        }
        if self.hidden_dim % self.num_heads != 0 {
            return fail(format!("hidden_dim {} is not divisible by num_heads {}", self.hidden_dim, self.num_heads));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        for (name, v) in [("src_vocab", self.src_vocab), ("base_vocab", self.base_vocab), ("mix_vocab", self.mix_vocab)] {
            if v <= NUM_SPECIAL {
                return fail(format!("{name} {v} leaves no room beyond the special tokens"));
            }
        }
        Ok(())
    }
}
