//! Minimal reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! The engine is define-by-run: every op builds a node holding its result and
//! a backward rule; [`backward`] walks the graph in reverse topological order
//! and accumulates gradients with `+=`, so shared subexpressions sum their
//! contributions rather than overwriting. Only the ops the TDNN stack needs
//! are provided.

mod checkpoint;
mod optimizer;
mod scalar;
mod value;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, RawCheckpoint, RawParam, CHECKPOINT_MAGIC,
};
pub use optimizer::{Optimizer, OptimizerKind, OptimizerSettings};
pub use scalar::Scalar;
pub use value::{
    backward, linear, softmax_cross_entropy, softmax_rows, tdnn_layer, vstack, AdError, Value,
};
