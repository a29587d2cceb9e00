//! Reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] on a scalar walks the record in reverse and accumulates
//! gradients into trainable leaves. Leaves created with [`Graph::constant`]
//! never receive gradients and never appear as gradient-receiving parents.

pub mod gradcheck;
mod graph;
mod optim;
mod tensor;

pub use graph::{AttentionLayout, Graph, Segment, Var};
pub use optim::Adam;
pub use tensor::Tensor;
#[allow(unused_imports)]
pub(crate) use tensor::{gemm, MatView};
