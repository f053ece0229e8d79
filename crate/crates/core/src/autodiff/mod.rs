//! Reverse-mode automatic differentiation over dense arrays.
//!
//! A [`Tape`] records one forward pass; [`Tape::backward`] replays it in
//! reverse to obtain exact gradients for every node, including the raw graph
//! inputs the explanation step differentiates against. [`adam_step`] applies
//! the Adam update to a parameter set.

mod adam;
mod array;
mod tape;

pub use adam::{adam_step, AdamState};
pub use array::Array;
pub use tape::{Gradients, NodeId, PoolMode, Tape};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("{op}: operand {operand} has shape {got:?}, expected {expected:?}")]
    ShapeMismatch {
        op: &'static str,
        operand: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("{op}: input list must not be empty")]
    EmptyInput { op: &'static str },
    #[error("bce_loss: target[{index}] = {value} is not 0 or 1")]
    NonBinaryTarget { index: usize, value: f64 },
    #[error("{op}: node does not belong to this tape")]
    ForeignNode { op: &'static str },
    #[error("backward: output must be scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("backward: component {index} out of range for output of length {len}")]
    ComponentOutOfRange { index: usize, len: usize },
    #[error("adam_step: learning rate must be positive, got {lr}")]
    NonPositiveLearningRate { lr: f64 },
}
