//! Two-dimensional table positional encoding (2D-TPE) for decoder-only
//! transformers.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: tensors, reverse-mode differentiation, Adam, gradient checking.
//! * [`table`]: table model, closed vocabulary, tokenizer producing segment-tagged streams.
//! * [`positions`]: per-order position matrices and rotary kernels.
//! * [`attention`]: routed mixture of per-order causal attentions and baselines.
//! * [`model`]: the decoder stack, training objective, decoding and cost accounting.
//! * [`tasks`]: Counting-Stars and Locating-Values generators and scorers.
//! * [`train`]: training, evaluation, gradient verification and router inspection.

pub mod attention;
pub mod error;
pub mod model;
pub mod numerics;
pub mod positions;
pub mod table;
pub mod tasks;
pub mod train;

pub use attention::{AttentionMode, RouterWeights};
pub use error::{Result, TpeError};
pub use model::{Model, ModelConfig};
pub use numerics::{Graph, ParamStore, Scalar, Tensor, Var};
pub use positions::{PositionMatrix, RopeConfig};
pub use table::{Segment, Table, TokenStream, Vocab};
pub use tasks::{Example, TaskKind};
