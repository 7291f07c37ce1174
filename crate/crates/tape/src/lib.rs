//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! The crate provides exactly what the augmentation networks and the
//! desk-scale target networks need: elementwise arithmetic, dense and
//! convolutional layers, batch normalization, cross-entropy, and an
//! extension point ([`Function`]) for domain kernels defined elsewhere.

pub mod fd;
mod graph;
pub mod kernels;
mod tensor;

pub use graph::{BatchStats, Function, Grads, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum TapeError {
    #[error("shape mismatch: expected {expected:?}, got {got:?}")]
    ShapeMismatch { expected: Vec<usize>, got: Vec<usize> },
}
