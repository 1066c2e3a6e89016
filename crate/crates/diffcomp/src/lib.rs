//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Values live in [`Tensor`]s. A forward pass records operations on a
//! [`Tape`] through [`Var`] handles; [`Tape::backward`] then produces
//! [`Gradients`]. Layer weights are kept in a [`ParamStore`] and updated by
//! [`Adam`].

pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod ops;
pub mod optim;
pub mod scalar;
pub mod store;
pub mod tape;
pub mod tensor;

pub use error::{Result, TensorError};
pub use gradcheck::{grad_check, grad_check_param};
pub use nn::{BatchNorm2d, Conv2d, Embedding, GruCell, Linear};
pub use ops::norm::{BatchNormOpts, BnMode, RunningStats};
pub use optim::{Adam, AdamConfig};
pub use scalar::{DType, Scalar};
pub use store::{Bound, Entry, EntryKind, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
