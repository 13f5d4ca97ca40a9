//! Minimal dense-tensor library with reverse-mode automatic differentiation.
//!
//! The graph is define-by-run: every forward op records its parents and enough
//! metadata to replay a vector-Jacobian product, and `backward` walks the graph
//! in reverse topological order. Everything is `f64` so finite-difference
//! checks stay decisive at small scale.

mod adam;
mod checkpoint;
mod error;
pub mod gradcheck;
mod ops;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointEntry};
pub use error::{Result, TensorError};
pub use ops::{
    additive_scores, bce_with_logits, conv2d, cross_entropy_logits, embedding, global_avg_pool,
    layer_norm, scatter_cols,
};
pub use tensor::{backward, Tensor};
