//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! replays it in reverse and deposits parameter gradients into the
//! [`ParamStore`]. Only the operators the network needs are provided.

mod conv;
pub mod gradcheck;
mod norm;
mod ops;
mod params;
mod tape;
mod tensor;

pub use norm::{RunningStats, BN_EPS, BN_MOMENTUM};
pub use ops::sigmoid;
pub use params::{ParamId, ParamKind, ParamStore, Parameter};
pub use tape::{Function, Tape, Var};
pub use tensor::Tensor;
