//! Dense tensors, reverse-mode differentiation and transformer building blocks.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod layers;
pub mod params;
pub mod rng;
pub mod rope;
pub mod tensor;

use thiserror::Error;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{gaussian_kl_term, AttentionMask, Grads, Graph, Var};
pub use layers::{FeedForward, LayerNormParams, Linear, MultiHeadAttention, TransformerBlock};
pub use params::{Gradients, ParamId, ParamStore};
pub use rope::{rope_apply, RotaryTable, DEFAULT_ROPE_BASE};
pub use tensor::{layer_norm_rows, sinusoidal_positions, softmax_rows, Scalar, Tensor};

#[derive(Debug, Error)]
pub enum NumericsError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("checkpoint i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
}
