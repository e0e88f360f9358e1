use std::fmt;
use std::str::FromStr;

use crate::config::{ConfigError, Section};
use crate::share_plan::{build_assignment, LayerAssignment, ShareStrategy};

use super::ModelError;

/// Where layer normalization sits relative to each residual branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LnPlacement {
    /// `x ← LN(x + f(x))`
    Post,
    /// `x ← x + f(LN(x))`, plus a final LN per stack.
    Pre,
}

impl fmt::Display for LnPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LnPlacement::Post => "post",
            LnPlacement::Pre => "pre",
        })
    }
}

impl FromStr for LnPlacement {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "post" | "post-ln" | "post_ln" => Ok(LnPlacement::Post),
            "pre" | "pre-ln" | "pre_ln" => Ok(LnPlacement::Pre),
            other => Err(format!("expected `post` or `pre`, got `{other}`")),
        }
    }
}

/// Token ids with a fixed role.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Specials {
    pub pad: usize,
    pub bos: usize,
    pub eos: usize,
}

impl Default for Specials {
    fn default() -> Self {
        Specials { pad: 0, bos: 1, eos: 2 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub enc_blocks: usize,
    pub dec_blocks: usize,
    pub strategy: ShareStrategy,
    pub ln_placement: LnPlacement,
    pub admin: bool,
    pub tie_embeddings: bool,
    pub dropout: f64,
    pub max_len: usize,
    pub specials: Specials,
}

impl Default for ModelConfig {
    /// Transformer (base) dimensions without sharing.
    fn default() -> Self {
        ModelConfig {
            d_model: 512,
            n_heads: 8,
            d_ff: 2048,
            vocab_size: 33_000,
            enc_layers: 6,
            dec_layers: 6,
            enc_blocks: 6,
            dec_blocks: 6,
            strategy: ShareStrategy::Sequence,
            ln_placement: LnPlacement::Post,
            admin: false,
            tie_embeddings: true,
            dropout: 0.1,
            max_len: 256,
            specials: Specials::default(),
        }
    }
}

const KEYS: &[&str] = &[
    "d_model",
    "n_heads",
    "d_ff",
    "vocab_size",
    "enc_layers",
    "dec_layers",
    "enc_blocks",
    "dec_blocks",
    "layers",
    "blocks",
    "strategy",
    "ln_placement",
    "admin",
    "tie_embeddings",
    "dropout",
    "max_len",
    "pad_id",
    "bos_id",
    "eos_id",
];

impl ModelConfig {
    /// Same layer count and block count for both stacks.
    pub fn with_depth(mut self, layers: usize, blocks: usize, strategy: ShareStrategy) -> Self {
        self.enc_layers = layers;
        self.dec_layers = layers;
        self.enc_blocks = blocks;
        self.dec_blocks = blocks;
        self.strategy = strategy;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Checks the dimensions and builds both stacks' assignments.
    pub fn assignments(&self) -> Result<(LayerAssignment, LayerAssignment), ModelError> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_ff == 0 {
            return Err(ModelError::Config("d_model, n_heads and d_ff must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::HeadsDoNotDivide {
                d_model: self.d_model,
                n_heads: self.n_heads,
            });
        }
        let s = self.specials;
        let max_special = s.pad.max(s.bos).max(s.eos);
        if self.vocab_size <= max_special {
            return Err(ModelError::Config(format!(
                "vocabulary of {} cannot hold special id {max_special}",
                self.vocab_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be positive".into()));
        }
        let enc = build_assignment(self.enc_layers, self.enc_blocks, self.strategy)?;
        let dec = build_assignment(self.dec_layers, self.dec_blocks, self.strategy)?;
        Ok((enc, dec))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.assignments().map(|_| ())
    }

    /// Reads a `[model]` section. `layers`/`blocks` set both stacks at once;
    /// the per-stack keys take precedence.
    pub fn from_section(section: &Section) -> Result<Self, ConfigError> {
        section.check_keys(KEYS)?;
        let d = ModelConfig::default();
        let layers: Option<usize> = section.get("layers")?;
        let blocks: Option<usize> = section.get("blocks")?;
        let enc_layers = section.get("enc_layers")?.or(layers).unwrap_or(d.enc_layers);
        let dec_layers = section.get("dec_layers")?.or(layers).unwrap_or(d.dec_layers);
        Ok(ModelConfig {
            d_model: section.get_or("d_model", d.d_model)?,
            n_heads: section.get_or("n_heads", d.n_heads)?,
            d_ff: section.get_or("d_ff", d.d_ff)?,
            vocab_size: section.get_or("vocab_size", d.vocab_size)?,
            enc_layers,
            dec_layers,
            enc_blocks: section.get("enc_blocks")?.or(blocks).unwrap_or(enc_layers),
            dec_blocks: section.get("dec_blocks")?.or(blocks).unwrap_or(dec_layers),
            strategy: section.get_or("strategy", d.strategy)?,
            ln_placement: section.get_or("ln_placement", d.ln_placement)?,
            admin: section.get_or("admin", d.admin)?,
            tie_embeddings: section.get_or("tie_embeddings", d.tie_embeddings)?,
            dropout: section.get_or("dropout", d.dropout)?,
            max_len: section.get_or("max_len", d.max_len)?,
            specials: Specials {
                pad: section.get_or("pad_id", d.specials.pad)?,
                bos: section.get_or("bos_id", d.specials.bos)?,
                eos: section.get_or("eos_id", d.specials.eos)?,
            },
        })
    }

    pub fn write_section(&self, section: &mut Section) {
        section
            .set("d_model", self.d_model)
            .set("n_heads", self.n_heads)
            .set("d_ff", self.d_ff)
            .set("vocab_size", self.vocab_size)
            .set("enc_layers", self.enc_layers)
            .set("dec_layers", self.dec_layers)
            .set("enc_blocks", self.enc_blocks)
            .set("dec_blocks", self.dec_blocks)
            .set("strategy", self.strategy)
            .set("ln_placement", self.ln_placement)
            .set("admin", self.admin)
            .set("tie_embeddings", self.tie_embeddings)
            .set("dropout", self.dropout)
            .set("max_len", self.max_len)
            .set("pad_id", self.specials.pad)
            .set("bos_id", self.specials.bos)
            .set("eos_id", self.specials.eos);
    }
}
