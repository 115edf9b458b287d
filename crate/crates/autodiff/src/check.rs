use crate::graph::{Graph, NodeId};
use crate::{Array, Bindings, GraphError};

/// Worst per-coordinate disagreement between `gradient` and central
/// differences, over every coordinate of every bound parameter.
///
/// The relative error of a coordinate is `|a - n| / max(|a|, |n|, 1e-8)`.
pub fn finite_difference_check(
    graph: &mut Graph,
    root: NodeId,
    bindings: &Bindings,
    epsilon: f64,
) -> Result<f64, GraphError> {
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(GraphError::InvalidEpsilon(epsilon));
    }
    let params = bindings.nodes();
    let grads = graph.gradient(root, &params)?;
    let analytic = graph.evaluate(&grads, bindings)?;

    let mut probe = bindings.clone();
    let mut worst = 0.0f64;
    for (p, a) in params.iter().zip(&analytic) {
        for k in 0..a.len() {
            let base = bindings.get(*p).expect("bound").data()[k];
            let mut eval_at = |x: f64| -> Result<f64, GraphError> {
                set_coordinate(&mut probe, *p, k, x);
                let v = graph.evaluate_one(root, &probe)?;
                Ok(v.item().expect("scalar root"))
            };
            let up = eval_at(base + epsilon)?;
            let down = eval_at(base - epsilon)?;
            set_coordinate(&mut probe, *p, k, base);
            let numeric = (up - down) / (2.0 * epsilon);
            let exact = a.data()[k];
            let denom = exact.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max((exact - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

fn set_coordinate(bindings: &mut Bindings, node: NodeId, k: usize, x: f64) {
    let arr = bindings.get_mut(node).expect("bound");
    let shape = arr.shape().to_vec();
    let mut data = std::mem::replace(arr, Array::scalar(0.0)).into_data();
    data[k] = x;
    *arr = Array::new(shape, data).expect("same length");
}
