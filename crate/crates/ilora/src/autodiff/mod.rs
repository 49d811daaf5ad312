//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! The op set is exactly what the graph branch, hypernetwork, and loss
//! need: linear algebra, pointwise nonlinearities, masked pooling and
//! softmax, pair-feature assembly, adjacency scatter, and the fused
//! reparameterized edge sample and rate-matching maps. Values are computed
//! eagerly; [`Tape::backward`] runs the reverse sweep.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::finite_diff;
pub use tape::{EdgeFeatureMode, Gradients, Tape, VarId};
pub use tensor::Tensor;
