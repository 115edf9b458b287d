//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] records operations as nodes. [`Graph::evaluate`] computes
//! forward values from parameter [`Bindings`]; [`Graph::gradient`] appends
//! the adjoint computation as new nodes, so gradients of gradients work the
//! same way as first derivatives.
//!
//! ```
//! use metaadapt_autodiff::{Array, Bindings, Graph};
//!
//! let mut g = Graph::new();
//! let x = g.parameter("x", &[]).unwrap();
//! let y = g.square(x);
//! let dy = g.gradient(y, &[x]).unwrap()[0];
//! let d2y = g.gradient(dy, &[x]).unwrap()[0];
//!
//! let mut b = Bindings::new();
//! b.bind(x, Array::scalar(3.0));
//! let v = g.evaluate(&[y, dy, d2y], &b).unwrap();
//! assert_eq!(v[0].item(), Some(9.0));
//! assert_eq!(v[1].item(), Some(6.0));
//! assert_eq!(v[2].item(), Some(2.0));
//! ```

mod array;
mod backward;
mod check;
mod eval;
mod graph;

pub use array::Array;
pub use check::finite_difference_check;
pub use eval::Bindings;
pub use graph::{Graph, Node, NodeId, Op, OpInputs};

#[derive(Debug, thiserror::Error)]
pub enum GraphError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("data of length {len} does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("arrays of rank {0} are not supported")]
    UnsupportedRank(usize),
    #[error("parameter `{0}` is not bound")]
    Unbound(String),
    #[error("parameter `{name}` bound with shape {found:?}, expected {expected:?}")]
    BindingShape {
        name: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("non-finite value produced by {op} node {node}")]
    NonFinite { node: NodeId, op: &'static str },
    #[error("gradient root must be scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("node {0} does not belong to this graph")]
    UnknownNode(NodeId),
    #[error("finite-difference step must be positive, got {0}")]
    InvalidEpsilon(f64),
}
