//! Reverse-mode differentiation over dense, row-major `f64` matrices.
//!
//! A [`Graph`] records operations as they are evaluated. Parameters are
//! borrowed from a [`ParamStore`] instead of copied, so many graphs can be
//! built concurrently against one frozen store and their [`Gradients`]
//! reduced afterwards in a fixed order.
//!
//! ```
//! use odtq_core::grad::{Graph, ParamStore};
//!
//! let mut store = ParamStore::new();
//! let x = store.insert("x", vec![1], vec![3.0]).unwrap();
//! let mut g = Graph::new(&store);
//! let xv = g.param(x);
//! let sq = g.mul(xv, xv).unwrap();
//! let loss = g.sum_all(sq);
//! let grads = g.backward(loss).unwrap();
//! grads.accumulate_into(&mut store);
//! assert_eq!(store.grad(x), &[6.0]);
//! ```

mod checkpoint;
mod graph;
mod params;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Axis, Gradients, Graph, Var};
pub use params::{Adam, ParamId, ParamStore, Tensor};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("softmax over a fully masked row")]
    AllMasked,
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss((usize, usize)),
    #[error("index {index} out of range for {what} of size {size}")]
    Index {
        what: &'static str,
        index: usize,
        size: usize,
    },
    #[error("non-finite gradient in parameter `{0}`")]
    Divergence(String),
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParam(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParamShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("tensor data length {len} does not match shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, GradError>;

/// `ln(1 + e^x)` without overflow for large `x`.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
