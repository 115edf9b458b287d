use metaadapt_autodiff::{finite_difference_check, Array, Bindings, Graph, GraphError, NodeId};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn scalar_param(g: &mut Graph, b: &mut Bindings, name: &str, v: f64) -> NodeId {
    let x = g.parameter(name, &[]).unwrap();
    b.bind(x, Array::scalar(v));
    x
}

fn random_array(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

#[test]
fn evaluate_examples() {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = scalar_param(&mut g, &mut b, "x", 3.0);
    let xx = g.mul(x, x).unwrap();
    assert_eq!(g.evaluate_one(xx, &b).unwrap().item(), Some(9.0));

    let zero = g.scalar(0.0);
    let t = g.tanh(zero);
    assert_eq!(g.evaluate_one(t, &b).unwrap().item(), Some(0.0));

    let eye = g.constant(Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
    let v = g.parameter("v", &[2, 1]).unwrap();
    b.bind(v, Array::matrix(2, 1, vec![1.0, 2.0]).unwrap());
    let mv = g.matmul(eye, v).unwrap();
    let s = g.sum(mv);
    assert_eq!(g.evaluate_one(s, &b).unwrap().item(), Some(3.0));
}

#[test]
fn gradient_examples() {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = scalar_param(&mut g, &mut b, "x", 3.0);
    let y = g.square(x);
    let dy = g.gradient(y, &[x]).unwrap()[0];
    assert_eq!(g.evaluate_one(dy, &b).unwrap().item(), Some(6.0));

    let d2y = g.gradient(dy, &[x]).unwrap()[0];
    for v in [-4.0, 0.0, 0.3, 11.0] {
        b.bind(x, Array::scalar(v));
        assert_eq!(g.evaluate_one(d2y, &b).unwrap().item(), Some(2.0));
    }

    b.bind(x, Array::scalar(2.0));
    let l = g.log(x);
    let dl = g.gradient(l, &[x]).unwrap()[0];
    assert_eq!(g.evaluate_one(dl, &b).unwrap().item(), Some(0.5));
}

#[test]
fn unused_parameter_gets_zero_gradient() {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = scalar_param(&mut g, &mut b, "x", 1.5);
    let w = g.parameter("w", &[3, 2]).unwrap();
    b.bind(w, Array::filled(&[3, 2], 7.0));
    let y = g.exp(x);
    let grads = g.gradient(y, &[x, w]).unwrap();
    let gw = g.evaluate_one(grads[1], &b).unwrap();
    assert_eq!(gw, Array::zeros(&[3, 2]));
}

#[test]
fn gradient_requires_scalar_root() {
    let mut g = Graph::new();
    let w = g.parameter("w", &[2]).unwrap();
    let y = g.tanh(w);
    assert!(matches!(g.gradient(y, &[w]), Err(GraphError::NotScalar(_))));
}

#[test]
fn evaluation_errors() {
    let mut g = Graph::new();
    let x = g.parameter("x", &[]).unwrap();
    let y = g.log(x);
    let empty = Bindings::new();
    assert!(matches!(g.evaluate_one(y, &empty), Err(GraphError::Unbound(_))));

    let mut b = Bindings::new();
    b.bind(x, Array::scalar(-1.0));
    assert!(matches!(g.evaluate_one(y, &b), Err(GraphError::NonFinite { .. })));

    b.bind(x, Array::vector(vec![1.0, 2.0]));
    assert!(matches!(g.evaluate_one(y, &b), Err(GraphError::BindingShape { .. })));

    let a = g.parameter("a", &[2, 3]).unwrap();
    let c = g.parameter("c", &[2, 3]).unwrap();
    assert!(g.matmul(a, c).is_err());
    let v = g.parameter("v", &[3]).unwrap();
    assert!(g.add(a, v).is_err());
    assert!(g.broadcast(a, &[4, 4]).is_err());
}

#[test]
fn hinge_and_abs_have_zero_derivative_at_origin() {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = scalar_param(&mut g, &mut b, "x", 0.0);
    let h = g.max0(x);
    let a = g.abs(x);
    let dh = g.gradient(h, &[x]).unwrap()[0];
    let da = g.gradient(a, &[x]).unwrap()[0];
    let v = g.evaluate(&[dh, da], &b).unwrap();
    assert_eq!(v[0].item(), Some(0.0));
    assert_eq!(v[1].item(), Some(0.0));
}

#[test]
fn stop_gradient_blocks_derivative_but_keeps_value() {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = scalar_param(&mut g, &mut b, "x", 1.25);
    let y = g.square(x);
    let s = g.stop_gradient(y);
    let ny = g.neg(y);
    let z = g.add(ny, s).unwrap();
    let z = g.shift(z, 4.0);
    let dz = g.gradient(z, &[x]).unwrap()[0];
    let v = g.evaluate(&[z, dz], &b).unwrap();
    assert_eq!(v[0].item(), Some(4.0));
    assert_eq!(v[1].item(), Some(-2.5));
}

#[test]
fn finite_difference_examples() {
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let x = scalar_param(&mut g, &mut b, "x", 3.0);
    let y = g.square(x);
    assert!(finite_difference_check(&mut g, y, &b, 1e-5).unwrap() < 1e-8);

    let c = g.scalar(5.0);
    let y0 = g.mul(c, c).unwrap();
    let y0 = g.add(y0, c).unwrap();
    // depends on nothing bound: both sides are exactly zero
    assert_eq!(finite_difference_check(&mut g, y0, &b, 1e-5).unwrap(), 0.0);

    assert!(matches!(
        finite_difference_check(&mut g, y, &b, 0.0),
        Err(GraphError::InvalidEpsilon(_))
    ));
}

/// Scalar output of a random two-layer tanh network, everything a parameter.
fn random_mlp(rng: &mut ChaCha8Rng) -> (Graph, NodeId, Bindings) {
    let batch = rng.random_range(1..5);
    let inp = rng.random_range(1..4);
    let hid = rng.random_range(1..6);
    let out = rng.random_range(1..3);
    let mut g = Graph::new();
    let mut b = Bindings::new();
    let mut param = |g: &mut Graph, name: &str, shape: &[usize], rng: &mut ChaCha8Rng| {
        let p = g.parameter(name, shape).unwrap();
        b.bind(p, random_array(rng, shape, -1.0, 1.0));
        p
    };
    let x = param(&mut g, "x", &[batch, inp], rng);
    let w1 = param(&mut g, "w1", &[inp, hid], rng);
    let b1 = param(&mut g, "b1", &[hid], rng);
    let w2 = param(&mut g, "w2", &[hid, out], rng);
    let b2 = param(&mut g, "b2", &[out], rng);
    let h = g.matmul(x, w1).unwrap();
    let bb = g.broadcast(b1, &[batch, hid]).unwrap();
    let h = g.add(h, bb).unwrap();
    let h = g.tanh(h);
    let o = g.matmul(h, w2).unwrap();
    let bb = g.broadcast(b2, &[batch, out]).unwrap();
    let o = g.add(o, bb).unwrap();
    let sq = g.square(o);
    let loss = g.mean(sq);
    (g, loss, b)
}

#[test]
fn random_mlp_graphs_match_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let (mut g, root, b) = random_mlp(&mut rng);
        let err = finite_difference_check(&mut g, root, &b, 1e-5).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }
}

type Unary = fn(&mut Graph, NodeId) -> NodeId;

/// Each op is wrapped so the scalar root is a smooth-enough function of a
/// random input in [-2, 2].
#[test]
fn every_op_matches_central_differences() {
    let unary: Vec<(&str, Unary)> = vec![
        ("tanh", |g, x| g.tanh(x)),
        ("exp", |g, x| g.exp(x)),
        ("log", |g, x| {
            let s = g.square(x);
            let s = g.shift(s, 1.0);
            g.log(s)
        }),
        ("square", |g, x| g.square(x)),
        ("abs", |g, x| g.abs(x)),
        ("max0", |g, x| g.max0(x)),
        ("scale", |g, x| g.scale(x, -1.7)),
        ("shift", |g, x| g.shift(x, 0.3)),
        ("transpose", |g, x| g.transpose(x).unwrap()),
        ("sum_rows", |g, x| g.sum_rows(x).unwrap()),
        ("mean", |g, x| g.mean(x)),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (name, op) in unary {
        for _ in 0..10 {
            let mut g = Graph::new();
            let mut b = Bindings::new();
            let x = g.parameter("x", &[3, 2]).unwrap();
            let mut v = random_array(&mut rng, &[3, 2], -2.0, 2.0);
            if name == "abs" || name == "max0" {
                // keep away from the kink
                let data = v.data().iter().map(|&t| if t.abs() < 0.05 { 0.5 } else { t }).collect();
                v = Array::new(vec![3, 2], data).unwrap();
            }
            b.bind(x, v);
            let y = op(&mut g, x);
            let w = g.constant(random_array(&mut rng, g.shape(y).to_vec().as_slice(), -1.0, 1.0));
            let y = g.mul(y, w).unwrap();
            let y = g.tanh(y);
            let root = g.sum(y);
            let err = finite_difference_check(&mut g, root, &b, 1e-5).unwrap();
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }

    type Binary = fn(&mut Graph, NodeId, NodeId) -> NodeId;
    let binary: Vec<(&str, Binary)> = vec![
        ("add", |g, a, b| g.add(a, b).unwrap()),
        ("sub", |g, a, b| g.sub(a, b).unwrap()),
        ("mul", |g, a, b| g.mul(a, b).unwrap()),
        ("div", |g, a, b| {
            let d = g.square(b);
            let d = g.shift(d, 0.5);
            g.div(a, d).unwrap()
        }),
        ("matmul", |g, a, b| {
            let bt = g.transpose(b).unwrap();
            g.matmul(a, bt).unwrap()
        }),
        ("broadcast", |g, a, b| {
            let r = g.sum_rows(b).unwrap();
            let r = g.broadcast(r, &[3, 2]).unwrap();
            let s = g.sum(a);
            let s = g.broadcast(s, &[3, 2]).unwrap();
            // positive derivative weights everywhere, so no cancellation
            let t = g.add(r, s).unwrap();
            let t = g.add(t, a).unwrap();
            g.scale(t, 0.2)
        }),
    ];
    for (name, op) in binary {
        for _ in 0..10 {
            let mut g = Graph::new();
            let mut bind = Bindings::new();
            let a = g.parameter("a", &[3, 2]).unwrap();
            let c = g.parameter("c", &[3, 2]).unwrap();
            bind.bind(a, random_array(&mut rng, &[3, 2], -2.0, 2.0));
            bind.bind(c, random_array(&mut rng, &[3, 2], -2.0, 2.0));
            let y = op(&mut g, a, c);
            let y = g.tanh(y);
            let root = g.sum(y);
            let err = finite_difference_check(&mut g, root, &bind, 1e-5).unwrap();
            assert!(err < 1e-5, "{name}: relative error {err}");
        }
    }
}

#[test]
fn second_order_quadratic_identity() {
    // f = ½‖θ − c‖²; θ' = θ − α∇f; d/dθ ½‖θ' − c‖² = (1 − α)²(θ − c)
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for alpha in [0.0, 0.1, 0.5, 1.0, 1.7] {
        let mut g = Graph::new();
        let mut b = Bindings::new();
        let theta = g.parameter("theta", &[4]).unwrap();
        let tv = random_array(&mut rng, &[4], -3.0, 3.0);
        let cv = random_array(&mut rng, &[4], -3.0, 3.0);
        b.bind(theta, tv.clone());
        let c = g.constant(cv.clone());
        let half_sq = |g: &mut Graph, x| {
            let d = g.sub(x, c).unwrap();
            let s = g.square(d);
            let s = g.sum(s);
            g.scale(s, 0.5)
        };
        let inner = half_sq(&mut g, theta);
        let grad = g.gradient(inner, &[theta]).unwrap()[0];
        let step = g.scale(grad, alpha);
        let adapted = g.sub(theta, step).unwrap();
        let outer = half_sq(&mut g, adapted);
        let meta = g.gradient(outer, &[theta]).unwrap()[0];
        let got = g.evaluate_one(meta, &b).unwrap();
        for k in 0..4 {
            let want = (1.0 - alpha) * (1.0 - alpha) * (tv.data()[k] - cv.data()[k]);
            assert!((got.data()[k] - want).abs() < 1e-10, "alpha {alpha}");
        }
    }
}

#[test]
fn evaluation_is_bit_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut g, root, b) = random_mlp(&mut rng);
    let params = b.nodes();
    let grads = g.gradient(root, &params).unwrap();
    let mut roots = vec![root];
    roots.extend(grads);
    let first = g.evaluate(&roots, &b).unwrap();
    let second = g.evaluate(&roots, &b).unwrap();
    for (x, y) in first.iter().zip(&second) {
        let xb: Vec<u64> = x.data().iter().map(|v| v.to_bits()).collect();
        let yb: Vec<u64> = y.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(xb, yb);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_is_linear(
        a in -3.0f64..3.0,
        bcoef in -3.0f64..3.0,
        xs in proptest::collection::vec(-2.0f64..2.0, 3),
    ) {
        let mut g = Graph::new();
        let mut bind = Bindings::new();
        let x = g.parameter("x", &[3]).unwrap();
        bind.bind(x, Array::vector(xs));
        let t = g.tanh(x);
        let f = g.sum(t);
        let e = g.exp(x);
        let e = g.mul(e, x).unwrap();
        let h = g.sum(e);
        let af = g.scale(f, a);
        let bh = g.scale(h, bcoef);
        let combo = g.add(af, bh).unwrap();
        let gc = g.gradient(combo, &[x]).unwrap()[0];
        let gf = g.gradient(f, &[x]).unwrap()[0];
        let gh = g.gradient(h, &[x]).unwrap()[0];
        let v = g.evaluate(&[gc, gf, gh], &bind).unwrap();
        for k in 0..3 {
            let want = a * v[1].data()[k] + bcoef * v[2].data()[k];
            prop_assert!((v[0].data()[k] - want).abs() < 1e-12);
        }
    }
}
