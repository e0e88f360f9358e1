//! Transformer encoder-decoder laboratory in which the layers of each stack
//! are views onto `M` independent parameter blocks spread over `N` layer
//! positions.
//!
//! The crate is organised bottom-up:
//!
//! - [`share_plan`] maps layer positions to parameter blocks (`SEQUENCE`,
//!   `CYCLE`, `CYCLE_REV`).
//! - [`tensor`] is a small dense tensor library with a reverse-mode tape.
//! - [`model`] builds the encoder-decoder on top of a [`model::ParameterStore`].
//! - [`train`] holds the optimizer, schedule, synthetic tasks and the
//!   training loop.
//! - [`bench`] measures training throughput and writes comparison reports.
//! - [`config`] reads and writes the plain `key = value` configuration files.

pub mod bench;
pub mod config;
pub mod experiment;
pub mod model;
pub mod seed;
pub mod share_plan;
pub mod tensor;
pub mod train;

pub use model::{Model, ModelConfig, ParameterStore};
pub use share_plan::{build_assignment, LayerAssignment, ShareStrategy};
pub use tensor::{Graph, Scalar, Tensor, Var};
