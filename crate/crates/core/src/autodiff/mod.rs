// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Parameters live in a
//! [`ParamStore`] outside the tape; [`Tape::backward`] adds gradients into
//! the store, and [`Adam`] consumes them.

mod params;
mod tape;
mod tensor;

pub use params::{Adam, ParamId, ParamStore};
pub use tape::{OpKind, Tape, Var};
pub use tensor::Tensor;
