//! Reverse-mode automatic differentiation over dense tensors, plus the Adam
//! optimizer and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod optim;
mod scalar;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Gradients, Graph, LossTarget, NodeId, Segment};
pub(crate) use graph::log_sum_exp;
pub use optim::{Adam, AdamConfig};
pub use scalar::Scalar;
pub use tensor::{ParamSet, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch at node {node} ({op}): {detail}")]
    ShapeMismatch {
        node: usize,
        op: &'static str,
        detail: String,
    },
    #[error("non-finite value at node {node} ({op}), element {index}")]
    NonFinite {
        node: usize,
        op: &'static str,
        index: usize,
    },
    #[error("invalid shape {shape:?}: dimensions must be positive")]
    InvalidShape { shape: Vec<usize> },
    #[error("shape {shape:?} does not match {len} values")]
    LengthMismatch { shape: Vec<usize>, len: usize },
    #[error("backward requested before the loss was computed")]
    BackwardBeforeForward,
    #[error("loss node {node} is not a scalar ({numel} elements)")]
    NotScalar { node: usize, numel: usize },
    #[error("unknown node {0}")]
    UnknownNode(usize),
    #[error("duplicate parameter id {0:?}")]
    DuplicateParam(String),
    #[error("mask references unknown module {0:?}")]
    UnknownModule(String),
    #[error("optimizer state does not match parameter shapes")]
    OptimizerStateMismatch,
}

/// How per-token losses inside one micro-batch are combined.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean over scored tokens.
    #[default]
    Mean,
    /// Plain sum; equals `Mean` times the token count.
    Sum,
}
