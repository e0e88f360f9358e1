use std::fmt;

use super::config::{LnPlacement, ModelConfig};

/// Closed-form parameter totals by component.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ParamBreakdown {
    /// Embedding tables, plus the output projection and its bias when untied.
    pub embeddings: usize,
    /// Attention and feed-forward weights of the encoder blocks.
    pub encoder_blocks: usize,
    /// Attention and feed-forward weights of the decoder blocks.
    pub decoder_blocks: usize,
    /// Every layer-norm gain and bias, including Pre-LN final norms.
    pub layer_norms: usize,
    /// Per-position residual scales.
    pub admin: usize,
}

impl ParamBreakdown {
    pub fn total(&self) -> usize {
        self.embeddings + self.encoder_blocks + self.decoder_blocks + self.layer_norms + self.admin
    }
}

impl fmt::Display for ParamBreakdown {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let rows = [
            ("embeddings", self.embeddings),
            ("encoder blocks", self.encoder_blocks),
            ("decoder blocks", self.decoder_blocks),
            ("layer norms", self.layer_norms),
            ("admin scales", self.admin),
        ];
        for (name, n) in rows {
            writeln!(f, "{name:<16}{n:>14}")?;
        }
        write!(f, "{:<16}{:>14}", "total", self.total())
    }
}

pub fn param_breakdown(config: &ModelConfig) -> ParamBreakdown {
    let d = config.d_model;
    let v = config.vocab_size;
    let attention = 4 * (d * d + d);
    let ffn = d * config.d_ff + config.d_ff + config.d_ff * d + d;
    let norm = 2 * d;

    let embeddings = if config.tie_embeddings { v * d } else { 3 * v * d + v };
    let final_norms = match config.ln_placement {
        LnPlacement::Pre => 2 * norm,
        LnPlacement::Post => 0,
    };
    let admin = if config.admin {
        d * (2 * config.enc_layers + 3 * config.dec_layers)
    } else {
        0
    };

    ParamBreakdown {
        embeddings,
        encoder_blocks: config.enc_blocks * (attention + ffn),
        decoder_blocks: config.dec_blocks * (2 * attention + ffn),
        layer_norms: config.enc_blocks * 2 * norm + config.dec_blocks * 3 * norm + final_norms,
        admin,
    }
}

/// Trainable scalars of the model `config` describes.
pub fn param_count(config: &ModelConfig) -> usize {
    param_breakdown(config).total()
}
