//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Leaves are recorded
//! with [`Tape::leaf`] (or the `constant`/`variable` shorthands), every
//! operation appends its output node, and [`Tape::backward`] sweeps the
//! nodes once in reverse. After the sweep each node recorded with
//! `requires_grad` carries `d(output)/d(node)` in its `grad` field,
//! including intermediate nodes.
//!
//! ```
//! use milgrad::autodiff::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.variable(Tensor::vector(vec![1.0, -2.0, 3.0]).unwrap()).unwrap();
//! let y = tape.abs(x).unwrap();
//! let s = tape.sum(y).unwrap();
//! tape.backward(s).unwrap();
//! assert_eq!(tape.grad(x).unwrap(), &[1.0, -1.0, 1.0]);
//! ```
//!
//! Subgradients at the kinks of `relu` and `abs` are zero. `min_k`/`max_k`
//! break ties by the lowest input index and route gradient only to the
//! selected positions.

mod tape;
mod tensor;

pub use tape::{
    bottom_k_indices, sigmoid, softmax_raw, top_k_indices, BinaryOp, Reduce, Tape, UnaryOp, Var,
};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} does not match data length {len}")]
    ShapeData { shape: Vec<usize>, len: usize },
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("k = {k} exceeds input length {len}")]
    InvalidK { k: usize, len: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("backward needs a single-element output, got shape {shape:?}")]
    NonScalarOutput { shape: Vec<usize> },
    #[error("variable is not recorded on this tape")]
    ForeignVar,
}
