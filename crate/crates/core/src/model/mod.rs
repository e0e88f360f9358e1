//! Encoder-decoder Transformer whose layers are views onto shared parameter
//! blocks.
//!
//! Layer `i` of the encoder runs with `store.encoder[enc_assignment.slot(i)]`,
//! and likewise for the decoder. A block used at `k` positions is recorded on
//! the tape once, so its gradient is the sum of the `k` per-position
//! contributions and a single optimizer update moves every position at once.

mod admin;
mod checkpoint;
mod config;
mod count;
mod forward;
mod gradcheck;
mod store;

use thiserror::Error;

use crate::share_plan::{LayerAssignment, PlanError};
use crate::tensor::{Scalar, TensorError};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::{LnPlacement, ModelConfig, Specials};
pub use count::{param_breakdown, param_count, ParamBreakdown};
pub use gradcheck::{gradient_check, tied_gradient_error, ParamCheck};
pub use forward::{positional_encoding, ForwardPass, Memory, TokenBatch};
pub use store::{
    AdminScales, AttentionParams, Bindings, DecoderBlock, Embeddings, EncoderBlock,
    FeedForwardParams, NormParams, ParamId, ParameterStore,
};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("d_model {d_model} is not divisible by n_heads {n_heads}")]
    HeadsDoNotDivide { d_model: usize, n_heads: usize },
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("token id {id} is outside the vocabulary of {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },
    #[error("source batch has {src} rows but target batch has {tgt}")]
    BatchMismatch { src: usize, tgt: usize },
    #[error("admin profiling requested on a model built without admin scales")]
    AdminDisabled,
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    pub store: ParameterStore<T>,
    enc_assignment: LayerAssignment,
    dec_assignment: LayerAssignment,
}

impl<T: Scalar> Model<T> {
    /// Allocates `M_enc + M_dec` blocks plus embeddings (and admin scales when
    /// enabled), initialized deterministically from `seed`.
    pub fn build(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        let (enc_assignment, dec_assignment) = config.assignments()?;
        let store = ParameterStore::allocate(&config, seed);
        Ok(Model {
            config,
            store,
            enc_assignment,
            dec_assignment,
        })
    }

    /// Wraps an existing store; its layout must match `config`.
    pub fn from_store(config: ModelConfig, store: ParameterStore<T>) -> Result<Self, ModelError> {
        let (enc_assignment, dec_assignment) = config.assignments()?;
        let layout = ParameterStore::<T>::allocate(&config, 0);
        let mismatch = store.len() != layout.len()
            || layout
                .iter()
                .zip(store.iter())
                .any(|((_, n1, t1), (_, n2, t2))| n1 != n2 || t1.shape() != t2.shape());
        if mismatch {
            return Err(ModelError::Checkpoint(
                "parameter store layout does not match the configuration".into(),
            ));
        }
        Ok(Model {
            config,
            store,
            enc_assignment,
            dec_assignment,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn enc_assignment(&self) -> &LayerAssignment {
        &self.enc_assignment
    }

    pub fn dec_assignment(&self) -> &LayerAssignment {
        &self.dec_assignment
    }

    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    /// Same weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            store: self.store.cast(),
            enc_assignment: self.enc_assignment.clone(),
            dec_assignment: self.dec_assignment.clone(),
        }
    }

    /// An unshared copy: one block per layer position, where position `i`
    /// holds a value copy of the block it used in `self`. Forward outputs are
    /// bitwise identical to the original's.
    pub fn clone_untied(&self) -> Model<T> {
        let config = ModelConfig {
            enc_blocks: self.config.enc_layers,
            dec_blocks: self.config.dec_layers,
            ..self.config.clone()
        };
        let (enc_assignment, dec_assignment) =
            config.assignments().expect("M = N is always a valid plan");
        let mut store = ParameterStore::<T>::allocate(&config, 0);

        let copy = |dst: Vec<ParamId>, src: Vec<ParamId>, store: &mut ParameterStore<T>| {
            for (d, s) in dst.into_iter().zip(src) {
                store
                    .get_mut(d)
                    .data_mut()
                    .copy_from_slice(self.store.get(s).data());
            }
        };
        for layer in 0..config.enc_layers {
            let slot = self.enc_assignment.slot(layer);
            let dst = store.encoder_block_params(layer);
            copy(dst, self.store.encoder_block_params(slot), &mut store);
        }
        for layer in 0..config.dec_layers {
            let slot = self.dec_assignment.slot(layer);
            let dst = store.decoder_block_params(layer);
            copy(dst, self.store.decoder_block_params(slot), &mut store);
        }
        let block_params = |name: &str| name.starts_with("enc.block") || name.starts_with("dec.block");
        let shared: Vec<(ParamId, ParamId)> = store
            .iter()
            .filter(|(_, name, _)| !block_params(name))
            .map(|(id, name, _)| (id, self.store.id_of(name).expect("same non-block layout")))
            .collect();
        for (dst, src) in shared {
            store
                .get_mut(dst)
                .data_mut()
                .copy_from_slice(self.store.get(src).data());
        }

        Model {
            config,
            store,
            enc_assignment,
            dec_assignment,
        }
    }
}
