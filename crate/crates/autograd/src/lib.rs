//! Dense `f64` tensors with define-by-run reverse-mode differentiation.
//!
//! Every computation is recorded on a [`Tape`] as a sequence of
//! [`Function`] applications. [`Tape::backward`] replays the record in
//! reverse and accumulates adjoints into the trainable entries of a
//! [`ParamStore`]. Model-specific primitives implement [`Function`] directly
//! and are applied with [`Tape::apply`].

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod ops;
mod optim;
mod params;
mod tape;
mod tensor;

pub use error::{Result, TensorError};
pub use ops::{BatchMoments, RunningStats, BN_EPS, BN_MOMENTUM, LOG_FLOOR};
pub use optim::{Adam, AdamConfig};
pub use params::{ParamId, ParamStore, Parameter};
pub use tape::{BackwardContext, Function, Gradients, Tape, Var};
pub use tensor::Tensor;
