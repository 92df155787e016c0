//! Minimal reverse-mode differentiation for dense f32 tensors.
//!
//! A [`Tape`] records every operation as it is evaluated; [`Tape::backward`]
//! walks it in reverse and accumulates gradients into the differentiable
//! leaves. Operations outside this module (the volume renderer) plug in
//! through [`Tape::push_op`] and the [`Backward`] trait.

mod adam;
mod checkpoint;
mod conv;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

use thiserror::Error;

pub use adam::{clip_global_norm, AdamState};
pub use checkpoint::Checkpoint;
pub use conv::{Conv3dLayer, ConvTranspose3dLayer};
pub use tape::{sigmoid, softplus, Backward, Grads, Tape, Values, Var};
pub use tensor::Tensor;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("node {0} is not on this tape")]
    NotOnTape(usize),
    #[error("backward needs a one-element loss, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("parameter {0} has no gradient")]
    MissingGrad(usize),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
