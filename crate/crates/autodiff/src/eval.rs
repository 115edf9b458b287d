use std::borrow::Cow;
use std::collections::HashMap;

use crate::graph::{Graph, NodeId, Op};
use crate::{Array, GraphError};

/// Values for the parameter nodes of a graph.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    values: HashMap<NodeId, Array>,
}

impl Bindings {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(&mut self, node: NodeId, value: Array) -> &mut Self {
        self.values.insert(node, value);
        self
    }

    pub fn get(&self, node: NodeId) -> Option<&Array> {
        self.values.get(&node)
    }

    pub fn get_mut(&mut self, node: NodeId) -> Option<&mut Array> {
        self.values.get_mut(&node)
    }

    /// Bound nodes in ascending order.
    pub fn nodes(&self) -> Vec<NodeId> {
        let mut ids: Vec<NodeId> = self.values.keys().copied().collect();
        ids.sort();
        ids
    }
}

impl Graph {
    pub fn evaluate_one(&self, root: NodeId, bindings: &Bindings) -> Result<Array, GraphError> {
        Ok(self.evaluate(&[root], bindings)?.pop().expect("one root"))
    }

    /// Forward values of `roots`. Only the ancestors of the roots are
    /// computed and intermediates are released after their last consumer.
    pub fn evaluate(&self, roots: &[NodeId], bindings: &Bindings) -> Result<Vec<Array>, GraphError> {
        let Some(&top) = roots.iter().max() else {
            return Ok(Vec::new());
        };
        if top.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(top));
        }
        let n = top.0 + 1;
        let mut needed = vec![false; n];
        let mut pinned = vec![false; n];
        for r in roots {
            needed[r.0] = true;
            pinned[r.0] = true;
        }
        let mut last_use = vec![0usize; n];
        for i in (0..n).rev() {
            if !needed[i] {
                continue;
            }
            for input in self.nodes[i].op.inputs().iter() {
                needed[input.0] = true;
                last_use[input.0] = last_use[input.0].max(i);
            }
        }

        let mut values: Vec<Option<Cow<'_, Array>>> = vec![None; n];
        for i in 0..n {
            if !needed[i] {
                continue;
            }
            let node = &self.nodes[i];
            let value: Cow<'_, Array> = match &node.op {
                Op::Constant(c) => Cow::Borrowed(c.as_ref()),
                Op::Parameter(name) => {
                    let v = bindings
                        .get(NodeId(i))
                        .ok_or_else(|| GraphError::Unbound(name.clone()))?;
                    if v.shape() != node.shape.as_slice() {
                        return Err(GraphError::BindingShape {
                            name: name.clone(),
                            expected: node.shape.clone(),
                            found: v.shape().to_vec(),
                        });
                    }
                    Cow::Borrowed(v)
                }
                op => {
                    let get = |id: NodeId| -> &Array {
                        values[id.0].as_deref().expect("inputs evaluated before consumers")
                    };
                    Cow::Owned(compute(op, &node.shape, get))
                }
            };
            if !value.is_finite() {
                return Err(GraphError::NonFinite {
                    node: NodeId(i),
                    op: node.op.name(),
                });
            }
            values[i] = Some(value);
            for input in node.op.inputs().iter() {
                if last_use[input.0] == i && !pinned[input.0] {
                    values[input.0] = None;
                }
            }
        }
        Ok(roots
            .iter()
            .map(|r| values[r.0].as_deref().expect("root evaluated").clone())
            .collect())
    }
}

fn map(a: &Array, f: impl Fn(f64) -> f64) -> Array {
    Array::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

fn zip(a: &Array, b: &Array, f: impl Fn(f64, f64) -> f64) -> Array {
    Array::from_parts(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

fn compute<'a>(op: &Op, shape: &[usize], get: impl Fn(NodeId) -> &'a Array) -> Array {
    match *op {
        Op::Constant(_) | Op::Parameter(_) => unreachable!("leaves are handled by the caller"),
        Op::Add(a, b) => zip(get(a), get(b), |x, y| x + y),
        Op::Sub(a, b) => zip(get(a), get(b), |x, y| x - y),
        Op::Mul(a, b) => zip(get(a), get(b), |x, y| x * y),
        Op::Div(a, b) => zip(get(a), get(b), |x, y| x / y),
        Op::MatMul(a, b) => matmul(get(a), get(b)),
        Op::Transpose(a) => {
            let a = get(a);
            let (r, c) = (a.shape()[0], a.shape()[1]);
            let src = a.data();
            let mut out = vec![0.0; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = src[i * c + j];
                }
            }
            Array::from_parts(vec![c, r], out)
        }
        Op::Tanh(a) => map(get(a), f64::tanh),
        Op::Exp(a) => map(get(a), f64::exp),
        Op::Log(a) => map(get(a), f64::ln),
        Op::Square(a) => map(get(a), |x| x * x),
        Op::Abs(a) => map(get(a), f64::abs),
        Op::Max0(a) => map(get(a), |x| if x > 0.0 { x } else { 0.0 }),
        Op::Step(a) => map(get(a), |x| if x > 0.0 { 1.0 } else { 0.0 }),
        Op::Sign(a) => map(get(a), |x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }),
        Op::Sum(a) => Array::scalar(get(a).data().iter().sum()),
        Op::Mean(a) => {
            let a = get(a);
            Array::scalar(a.data().iter().sum::<f64>() / a.len() as f64)
        }
        Op::SumRows(a) => {
            let a = get(a);
            let cols = a.shape()[1];
            let mut out = vec![0.0; cols];
            for row in a.data().chunks_exact(cols.max(1)) {
                for (o, x) in out.iter_mut().zip(row) {
                    *o += x;
                }
            }
            Array::from_parts(vec![cols], out)
        }
        Op::Scale(a, c) => map(get(a), |x| x * c),
        Op::Shift(a, c) => map(get(a), |x| x + c),
        Op::Broadcast(a) => {
            let a = get(a);
            let total: usize = shape.iter().product();
            let data = if a.shape().is_empty() {
                vec![a.data()[0]; total]
            } else {
                let mut data = Vec::with_capacity(total);
                while data.len() < total {
                    data.extend_from_slice(a.data());
                }
                data
            };
            Array::from_parts(shape.to_vec(), data)
        }
        Op::StopGradient(a) => get(a).clone(),
    }
}

fn matmul(a: &Array, b: &Array) -> Array {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    let mut out = vec![0.0; m * n];
    if m > 0 && n > 0 && k > 0 {
        // SAFETY: slices are sized m*k, k*n and m*n with row-major strides.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.data().as_ptr(),
                k as isize,
                1,
                b.data().as_ptr(),
                n as isize,
                1,
                0.0,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    Array::from_parts(vec![m, n], out)
}
