//! Minimal differentiable tensor layer.
//!
//! Every operation has a pure forward kernel in [`ops`] and a matching
//! backward rule wired through [`Tape`]. Gradients are checked against
//! central differences by [`gradcheck`].

pub mod gradcheck;
pub mod ops;
pub(crate) mod parallel;
mod real;
mod tape;
mod tensor;

pub use ops::{ConvParams, DenseParams, Padding, PoolKind};
pub use real::Real;
pub use tape::{Gradients, OpKind, Tape, Var, ALL_OPS};
pub use tensor::{Shape, Tensor};
