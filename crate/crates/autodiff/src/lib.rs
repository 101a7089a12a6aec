//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] is a tape: every forward operation appends a node holding its
//! value, and [`Graph::backward`] walks the tape in reverse to produce
//! gradients. Trainable state lives outside the tape in a [`ParamStore`], so a
//! fresh graph can be built for every sample while parameters, gradients and
//! optimizer moments persist across steps.
//!
//! Binary elementwise operations follow NumPy broadcasting: shapes are aligned
//! on their trailing dimensions and a dimension of size 1 (or a missing leading
//! dimension) is stretched to match the other operand.

mod checkpoint;
mod error;
pub mod gradcheck;
mod graph;
pub mod layers;
mod optim;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, Checkpoint};
pub use error::{Result, TensorError};
pub use graph::{Gradients, Graph, Var};
pub use optim::{adamw_update, cosine_lr, AdamW, AdamWConfig, MomentState};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
