//! Symbolic reverse mode.
//!
//! `gradient` appends the adjoint computation to the graph instead of
//! producing numbers, so a gradient node can be fed into further ops and
//! differentiated again.

use crate::graph::{Graph, NodeId, Op};
use crate::{Array, GraphError};

impl Graph {
    /// Nodes holding `d root / d wrt[i]`.
    ///
    /// `root` must hold exactly one element. A `wrt` node the root does not
    /// depend on gets a zero constant of its shape.
    pub fn gradient(&mut self, root: NodeId, wrt: &[NodeId]) -> Result<Vec<NodeId>, GraphError> {
        if root.0 >= self.nodes.len() {
            return Err(GraphError::UnknownNode(root));
        }
        if let Some(&bad) = wrt.iter().find(|w| w.0 >= self.nodes.len()) {
            return Err(GraphError::UnknownNode(bad));
        }
        let root_shape = self.shape(root).to_vec();
        if root_shape.iter().product::<usize>() != 1 {
            return Err(GraphError::NotScalar(root_shape));
        }

        let n = root.0 + 1;
        // active[i]: a derivative path exists from some wrt node into node i.
        let mut active = vec![false; n];
        for w in wrt {
            if w.0 < n {
                active[w.0] = true;
            }
        }
        for i in 0..n {
            if active[i] {
                continue;
            }
            let op = &self.nodes[i].op;
            active[i] = op.passes_gradient() && op.inputs().iter().any(|j| active[j.0]);
        }

        let mut adjoint: Vec<Option<NodeId>> = vec![None; n];
        if active[root.0] {
            adjoint[root.0] = Some(self.constant(Array::filled(&root_shape, 1.0)));
        }

        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            if !active[i] {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if !op.passes_gradient() {
                continue;
            }
            let y = NodeId(i);
            let mut contribute = |graph: &mut Graph, target: NodeId, build: &dyn Fn(&mut Graph) -> Result<NodeId, GraphError>| -> Result<(), GraphError> {
                if !active[target.0] {
                    return Ok(());
                }
                let c = build(graph)?;
                adjoint[target.0] = Some(match adjoint[target.0] {
                    Some(prev) => graph.add(prev, c)?,
                    None => c,
                });
                Ok(())
            };
            match op {
                Op::Add(a, b) => {
                    contribute(self, a, &|_| Ok(g))?;
                    contribute(self, b, &|_| Ok(g))?;
                }
                Op::Sub(a, b) => {
                    contribute(self, a, &|_| Ok(g))?;
                    contribute(self, b, &|gr| Ok(gr.neg(g)))?;
                }
                Op::Mul(a, b) => {
                    contribute(self, a, &|gr| gr.mul(g, b))?;
                    contribute(self, b, &|gr| gr.mul(g, a))?;
                }
                Op::Div(a, b) => {
                    contribute(self, a, &|gr| gr.div(g, b))?;
                    // d(a/b)/db = -y/b
                    contribute(self, b, &|gr| {
                        let gy = gr.mul(g, y)?;
                        let q = gr.div(gy, b)?;
                        Ok(gr.neg(q))
                    })?;
                }
                Op::MatMul(a, b) => {
                    contribute(self, a, &|gr| {
                        let bt = gr.transpose(b)?;
                        gr.matmul(g, bt)
                    })?;
                    contribute(self, b, &|gr| {
                        let at = gr.transpose(a)?;
                        gr.matmul(at, g)
                    })?;
                }
                Op::Transpose(a) => contribute(self, a, &|gr| gr.transpose(g))?,
                Op::Tanh(a) => contribute(self, a, &|gr| {
                    let y2 = gr.square(y);
                    let d = gr.scale(y2, -1.0);
                    let d = gr.shift(d, 1.0);
                    gr.mul(g, d)
                })?,
                Op::Exp(a) => contribute(self, a, &|gr| gr.mul(g, y))?,
                Op::Log(a) => contribute(self, a, &|gr| gr.div(g, a))?,
                Op::Square(a) => contribute(self, a, &|gr| {
                    let two_a = gr.scale(a, 2.0);
                    gr.mul(g, two_a)
                })?,
                Op::Abs(a) => contribute(self, a, &|gr| {
                    let s = gr.sign(a);
                    gr.mul(g, s)
                })?,
                Op::Max0(a) => contribute(self, a, &|gr| {
                    let s = gr.step(a);
                    gr.mul(g, s)
                })?,
                Op::Sum(a) => contribute(self, a, &|gr| {
                    let shape = gr.shape(a).to_vec();
                    let g = gr.to_scalar(g)?;
                    gr.broadcast(g, &shape)
                })?,
                Op::Mean(a) => contribute(self, a, &|gr| {
                    let shape = gr.shape(a).to_vec();
                    let count = shape.iter().product::<usize>() as f64;
                    let g = gr.to_scalar(g)?;
                    let b = gr.broadcast(g, &shape)?;
                    Ok(gr.scale(b, 1.0 / count))
                })?,
                Op::SumRows(a) => contribute(self, a, &|gr| {
                    let shape = gr.shape(a).to_vec();
                    gr.broadcast(g, &shape)
                })?,
                Op::Scale(a, c) => contribute(self, a, &|gr| Ok(gr.scale(g, c)))?,
                Op::Shift(a, _) => contribute(self, a, &|_| Ok(g))?,
                Op::Broadcast(a) => contribute(self, a, &|gr| {
                    if gr.shape(a).is_empty() {
                        Ok(gr.sum(g))
                    } else {
                        gr.sum_rows(g)
                    }
                })?,
                Op::Constant(_) | Op::Parameter(_) | Op::Step(_) | Op::Sign(_) | Op::StopGradient(_) => {
                    unreachable!("filtered by passes_gradient")
                }
            }
        }

        let mut out = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = if w.0 < n { adjoint[w.0] } else { None };
            out.push(match g {
                Some(g) => g,
                None => {
                    let shape = self.shape(w).to_vec();
                    self.constant(Array::zeros(&shape))
                }
            });
        }
        Ok(out)
    }
}
