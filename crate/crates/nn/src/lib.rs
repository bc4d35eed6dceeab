//! A minimal deterministic tensor library with define-by-run reverse-mode
//! automatic differentiation.
//!
//! Values live in plain [`Tensor`]s. A [`Tape`] records every operation of a
//! forward pass; [`Tape::backward`] replays it in reverse and accumulates
//! gradients into the participating [`Parameter`]s of a [`ParamStore`].
//!
//! Everything is generic over [`Real`] so the same model code runs in single
//! precision for training and in double precision for gradient checks.

mod checkpoint;
mod error;
pub mod gradcheck;
mod kernels;
mod optim;
mod param;
mod real;
mod tape;
mod tensor;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use error::{NnError, Result};
pub use kernels::{conv2d_output_size, gemm};
pub use optim::{AdamW, AdamWConfig};
pub use param::{kaiming_uniform, ParamId, ParamStore, Parameter};
pub use real::Real;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
