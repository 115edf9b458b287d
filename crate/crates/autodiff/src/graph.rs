use std::fmt;
use std::sync::Arc;

use crate::{Array, GraphError};

/// Handle to a node. Handles are only meaningful for the graph that issued them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "#{}", self.0)
    }
}

#[derive(Clone, Debug)]
pub enum Op {
    Constant(Arc<Array>),
    Parameter(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Square(NodeId),
    Abs(NodeId),
    /// `max(x, 0)`.
    Max0(NodeId),
    /// Heaviside step, 1 where `x > 0`; carries no gradient.
    Step(NodeId),
    /// Sign with `sign(0) = 0`; carries no gradient.
    Sign(NodeId),
    /// Sum of all entries, producing a scalar.
    Sum(NodeId),
    /// Mean of all entries, producing a scalar.
    Mean(NodeId),
    /// Sum over the leading dimension, `[m, n] -> [n]`.
    SumRows(NodeId),
    Scale(NodeId, f64),
    /// `x + c` for a constant `c`.
    Shift(NodeId, f64),
    /// Scalar to any shape, or `[n]` to `[m, n]`; target shape is the node's shape.
    Broadcast(NodeId),
    /// Identity in value, zero in derivative.
    StopGradient(NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Constant(_) => "constant",
            Op::Parameter(_) => "parameter",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Tanh(_) => "tanh",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Abs(_) => "abs",
            Op::Max0(_) => "max0",
            Op::Step(_) => "step",
            Op::Sign(_) => "sign",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::SumRows(_) => "sum_rows",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::Broadcast(_) => "broadcast",
            Op::StopGradient(_) => "stop_gradient",
        }
    }

    pub fn inputs(&self) -> OpInputs {
        use Op::*;
        match *self {
            Constant(_) | Parameter(_) => OpInputs::None,
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | MatMul(a, b) => OpInputs::Two(a, b),
            Transpose(a) | Tanh(a) | Exp(a) | Log(a) | Square(a) | Abs(a) | Max0(a) | Step(a)
            | Sign(a) | Sum(a) | Mean(a) | SumRows(a) | Scale(a, _) | Shift(a, _)
            | Broadcast(a) | StopGradient(a) => OpInputs::One(a),
        }
    }

    /// Whether a derivative can flow from this node into its inputs.
    pub(crate) fn passes_gradient(&self) -> bool {
        !matches!(
            self,
            Op::Constant(_) | Op::Parameter(_) | Op::Step(_) | Op::Sign(_) | Op::StopGradient(_)
        )
    }
}

#[derive(Clone, Copy, Debug)]
pub enum OpInputs {
    None,
    One(NodeId),
    Two(NodeId, NodeId),
}

impl OpInputs {
    pub fn iter(self) -> impl Iterator<Item = NodeId> {
        let (a, b) = match self {
            OpInputs::None => (None, None),
            OpInputs::One(a) => (Some(a), None),
            OpInputs::Two(a, b) => (Some(a), Some(b)),
        };
        a.into_iter().chain(b)
    }
}

#[derive(Clone, Debug)]
pub struct Node {
    pub op: Op,
    pub shape: Vec<usize>,
}

/// An append-only expression graph.
///
/// Nodes are created in topological order: every input handle is smaller than
/// the handle of the node consuming it. Gradients are themselves built as
/// nodes of the same graph, so they can be differentiated again.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn is_parameter(&self, id: NodeId) -> bool {
        matches!(self.nodes[id.0].op, Op::Parameter(_))
    }

    fn push(&mut self, op: Op, shape: Vec<usize>) -> NodeId {
        debug_assert!(op.inputs().iter().all(|i| i.0 < self.nodes.len()));
        self.nodes.push(Node { op, shape });
        NodeId(self.nodes.len() - 1)
    }

    fn check(&self, id: NodeId) -> Result<(), GraphError> {
        if id.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(GraphError::UnknownNode(id))
        }
    }

    pub fn constant(&mut self, value: Array) -> NodeId {
        let shape = value.shape().to_vec();
        self.push(Op::Constant(Arc::new(value)), shape)
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Array::scalar(value))
    }

    pub fn parameter(&mut self, name: impl Into<String>, shape: &[usize]) -> Result<NodeId, GraphError> {
        if shape.len() > 2 {
            return Err(GraphError::UnsupportedRank(shape.len()));
        }
        Ok(self.push(Op::Parameter(name.into()), shape.to_vec()))
    }

    fn elementwise(
        &mut self,
        a: NodeId,
        b: NodeId,
        make: fn(NodeId, NodeId) -> Op,
    ) -> Result<NodeId, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(GraphError::ShapeMismatch {
                op: make(a, b).name(),
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let shape = sa.to_vec();
        Ok(self.push(make(a, b), shape))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise(a, b, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise(a, b, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise(a, b, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.elementwise(a, b, Op::Div)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(GraphError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let shape = vec![sa[0], sb[1]];
        Ok(self.push(Op::MatMul(a, b), shape))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch {
                op: "transpose",
                left: s.to_vec(),
                right: Vec::new(),
            });
        }
        let shape = vec![s[1], s[0]];
        Ok(self.push(Op::Transpose(a), shape))
    }

    fn unary(&mut self, op: Op) -> NodeId {
        let OpInputs::One(a) = op.inputs() else {
            unreachable!("unary op with arity != 1")
        };
        let shape = self.shape(a).to_vec();
        self.push(op, shape)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Log(a))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Square(a))
    }

    pub fn abs(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Abs(a))
    }

    pub fn max0(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Max0(a))
    }

    pub fn step(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Step(a))
    }

    pub fn sign(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::Sign(a))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        self.unary(Op::Scale(a, factor))
    }

    pub fn shift(&mut self, a: NodeId, offset: f64) -> NodeId {
        self.unary(Op::Shift(a, offset))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn stop_gradient(&mut self, a: NodeId) -> NodeId {
        self.unary(Op::StopGradient(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a), Vec::new())
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Mean(a), Vec::new())
    }

    pub fn sum_rows(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        let s = self.shape(a);
        if s.len() != 2 {
            return Err(GraphError::ShapeMismatch {
                op: "sum_rows",
                left: s.to_vec(),
                right: Vec::new(),
            });
        }
        let shape = vec![s[1]];
        Ok(self.push(Op::SumRows(a), shape))
    }

    /// Expand a scalar to any shape, or a vector `[n]` to `[m, n]`.
    pub fn broadcast(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId, GraphError> {
        self.check(a)?;
        let s = self.shape(a);
        let ok = shape.len() <= 2
            && (s.is_empty()
                || s == shape
                || (s.len() == 1 && shape.len() == 2 && s[0] == shape[1]));
        if !ok {
            return Err(GraphError::ShapeMismatch {
                op: "broadcast",
                left: s.to_vec(),
                right: shape.to_vec(),
            });
        }
        if s == shape {
            return Ok(a);
        }
        Ok(self.push(Op::Broadcast(a), shape.to_vec()))
    }

    /// Collapse any one-element node to rank 0.
    pub fn to_scalar(&mut self, a: NodeId) -> Result<NodeId, GraphError> {
        self.check(a)?;
        if numel(self.shape(a)) != 1 {
            return Err(GraphError::NotScalar(self.shape(a).to_vec()));
        }
        if self.shape(a).is_empty() {
            return Ok(a);
        }
        Ok(self.sum(a))
    }
}
