use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::memory::MemoryAttention;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Dual attention stream with a residual gated memory update.
    Membart,
    /// Memory cross-attention added directly between attention and feed-forward.
    MemformerInsert,
    /// Memory cross-attention scaled by a zero-initialized trainable weight.
    MemformerRezero,
    /// Dual attention stream whose memory projections reuse the input stream's.
    MembartShared,
    /// Plain encoder-decoder without memory.
    Stateless,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Membart,
        Variant::MemformerInsert,
        Variant::MemformerRezero,
        Variant::MembartShared,
        Variant::Stateless,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Membart => "membart",
            Variant::MemformerInsert => "memformer_insert",
            Variant::MemformerRezero => "memformer_rezero",
            Variant::MembartShared => "membart_shared",
            Variant::Stateless => "stateless",
        }
    }

    pub fn is_dual_stream(self) -> bool {
        matches!(self, Variant::Membart | Variant::MembartShared)
    }

    pub fn is_memformer(self) -> bool {
        matches!(self, Variant::MemformerInsert | Variant::MemformerRezero)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

impl FromStr for MemoryAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MemoryAttention::SlotDiagonal, MemoryAttention::FullKeys]
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown memory attention `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub variant: Variant,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub hidden_size: usize,
    pub heads: usize,
    pub memory_size: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub ffn_expansion: usize,
    pub memory_attention: MemoryAttention,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Membart,
            encoder_layers: 2,
            decoder_layers: 2,
            hidden_size: 64,
            heads: 4,
            memory_size: 8,
            vocab_size: 256,
            max_positions: 520,
            ffn_expansion: 4,
            memory_attention: MemoryAttention::SlotDiagonal,
        }
    }
}

impl ModelConfig {
    /// The `d = 8`, two-layer, two-slot configuration used by the gradient tests.
    pub fn tiny(variant: Variant) -> Self {
        Self {
            variant,
            encoder_layers: 2,
            decoder_layers: 2,
            hidden_size: 8,
            heads: 2,
            memory_size: 2,
            vocab_size: 12,
            max_positions: 16,
            ffn_expansion: 2,
            memory_attention: MemoryAttention::SlotDiagonal,
        }
    }

    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn with_memory_size(mut self, k: usize) -> Self {
        self.memory_size = k;
        self
    }

    /// Number of memory slots the model actually carries.
    pub fn slots(&self) -> usize {
        if self.variant == Variant::Stateless {
            0
        } else {
            self.memory_size
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        self.hidden_size * self.ffn_expansion
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.hidden_size == 0 || self.heads == 0 || self.hidden_size % self.heads != 0 {
            return fail(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.hidden_size, self.heads
            ));
        }
        if self.hidden_size < 2 {
            return fail("hidden size must be at least 2".into());
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return fail("encoder and decoder need at least one layer".into());
        }
        if self.vocab_size <= crate::data::NUM_SPECIAL {
            return fail(format!("vocabulary {} leaves no content tokens", self.vocab_size));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be at least 2".into());
        }
        if self.ffn_expansion == 0 {
            return fail("ffn_expansion must be positive".into());
        }
        Ok(())
    }

    /// Stable `key = value` rendering; hashed into checkpoint headers.
    pub fn canonical_text(&self) -> String {
        format!(
            "model.variant = {}\nmodel.encoder_layers = {}\nmodel.decoder_layers = {}\nmodel.hidden_size = {}\n\
             model.heads = {}\nmodel.memory_size = {}\nmodel.vocab_size = {}\nmodel.max_positions = {}\n\
             model.ffn_expansion = {}\nmodel.memory_attention = {}\n",
            self.variant,
            self.encoder_layers,
            self.decoder_layers,
            self.hidden_size,
            self.heads,
            self.memory_size,
            self.vocab_size,
            self.max_positions,
            self.ffn_expansion,
            self.memory_attention.name(),
        )
    }
}
