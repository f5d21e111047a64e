//! Central-difference checks for every differentiable graph op, 100 random
//! small inputs each, evaluated in 32-bit.

use std::collections::BTreeMap;

use control_llm::tensor::{finite_diff_check, Graph, GraphObjective, NodeId, Objective, Tensor};
use control_llm::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: u64 = 100;
const EPS: f64 = 1e-2;

type Leaves = BTreeMap<String, NodeId>;
type Point = BTreeMap<String, Tensor<f64>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Output shape of `build` at `point`.
fn output_shape(
    build: &impl Fn(&mut Graph<'static, f32>, &Leaves) -> Result<NodeId>,
    point: &Point,
) -> Vec<usize> {
    let mut g = Graph::new();
    let leaves = point
        .iter()
        .map(|(k, v)| (k.clone(), g.param(k, std::borrow::Cow::Owned(v.cast()), true)))
        .collect();
    let out = build(&mut g, &leaves).unwrap();
    g.shape(out).to_vec()
}

/// Readout weights with random sign and magnitude in [0.5, 1.5), exact in f32.
fn seed(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.5f32..1.5);
        (if rng.gen_bool(0.5) { m } else { -m }) as f64
    })
}

fn objective(
    build: impl Fn(&mut Graph<'static, f32>, &Leaves) -> Result<NodeId> + Clone + 'static,
    point: &Point,
    rng: &mut ChaCha8Rng,
) -> GraphObjective<f32> {
    let shape = output_shape(&build, point);
    GraphObjective::<f32>::new(build).with_seed(seed(rng, &shape))
}

fn check(
    label: &str,
    point_fn: impl Fn(&mut ChaCha8Rng) -> Point,
    build: impl Fn(&mut Graph<'static, f32>, &Leaves, u64) -> Result<NodeId> + Clone + 'static,
) {
    check_eps(label, EPS, point_fn, build)
}

fn check_eps(
    label: &str,
    eps: f64,
    point_fn: impl Fn(&mut ChaCha8Rng) -> Point,
    build: impl Fn(&mut Graph<'static, f32>, &Leaves, u64) -> Result<NodeId> + Clone + 'static,
) {
    let (mut worst, mut worst_elem) = (0.0f64, 0.0f64);
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let point = point_fn(&mut rng);
        let b = build.clone();
        let mut obj = objective(move |g, l| b(g, l, trial), &point, &mut rng);
        let report = finite_diff_check(&mut obj, &point, eps).unwrap();
        worst = worst.max(report.max_rel_error);
        worst_elem = worst_elem.max(report.max_elementwise_rel_error);
        assert!(report.passed, "{label} trial {trial}: {:?}", report.worst());
    }
    eprintln!("{label}: worst relative error {worst:.2e} (elementwise {worst_elem:.2e})");
}

fn pt(entries: Vec<(&str, Tensor<f64>)>) -> Point {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

#[test]
fn elementwise_ops() {
    check(
        "add",
        |r| pt(vec![("a", random(r, &[2, 4], -1.0, 1.0)), ("b", random(r, &[2, 4], -1.0, 1.0))]),
        |g, l, _| {
g.add(l["a"], l["b"])
        },
    );
    check(
        "sub",
        |r| pt(vec![("a", random(r, &[2, 4], -1.0, 1.0)), ("b", random(r, &[2, 4], -1.0, 1.0))]),
        |g, l, _| {
            g.sub(l["a"], l["b"])
        },
    );
    check(
        "mul",
        |r| pt(vec![("a", random(r, &[2, 4], 0.5, 1.5)), ("b", random(r, &[2, 4], -1.5, -0.5))]),
        |g, l, _| {
            g.mul(l["a"], l["b"])
        },
    );
    check(
        "scale",
        |r| pt(vec![("a", random(r, &[3, 2], -1.0, 1.0))]),
        |g, l, _| {
            g.scale(l["a"], -2.5)
        },
    );
    check(
        "add_broadcast",
        |r| pt(vec![("a", random(r, &[2, 3, 4], -1.0, 1.0)), ("b", random(r, &[3, 4], -1.0, 1.0))]),
        |g, l, _| {
            g.add_broadcast(l["a"], l["b"])
        },
    );
    check(
        "mul_broadcast",
        |r| pt(vec![("a", random(r, &[2, 3], 0.5, 1.5)), ("b", random(r, &[1], 0.5, 1.5))]),
        |g, l, _| {
            g.mul_broadcast(l["a"], l["b"])
        },
    );
    check(
        "gelu",
        |r| pt(vec![("x", random(r, &[2, 4], -2.0, 2.0))]),
        |g, l, _| {
            g.gelu(l["x"])
        },
    );
    check(
        "sigmoid",
        |r| pt(vec![("x", random(r, &[2, 4], -3.0, 3.0))]),
        |g, l, _| {
            g.sigmoid(l["x"])
        },
    );
    check(
        "reshape",
        |r| pt(vec![("x", random(r, &[2, 4], -1.0, 1.0))]),
        |g, l, _| {
            g.reshape(l["x"], &[4, 2])
        },
    );
    check(
        "concat",
        |r| pt(vec![("a", random(r, &[2, 3], -1.0, 1.0)), ("b", random(r, &[2, 2], -1.0, 1.0))]),
        |g, l, _| {
            g.concat(l["a"], l["b"])
        },
    );
}

#[test]
fn reductions_and_normalisation() {
    check(
        "softmax",
        |r| pt(vec![("x", random(r, &[2, 4], -2.0, 2.0))]),
        |g, l, _| {
            g.softmax(l["x"])
        },
    );
    check(
        "rmsnorm",
        |r| pt(vec![("x", random(r, &[2, 4], 0.5, 1.5)), ("gain", random(r, &[4], 0.5, 1.5))]),
        |g, l, _| {
            g.rmsnorm(l["x"], l["gain"], 1e-5)
        },
    );
    check(
        "mean",
        |r| pt(vec![("x", random(r, &[5], -1.0, 1.0))]),
        |g, l, _| g.mean(l["x"]),
    );
    check(
        "cross_entropy",
        |r| pt(vec![("logits", random(r, &[3, 5], -2.0, 2.0))]),
        |g, l, s| g.cross_entropy(l["logits"], &[(s % 5) as usize, 1, 4], &[true, false, true]),
    );
    check(
        "row_mse",
        |r| pt(vec![("a", random(r, &[2, 4], -1.0, 1.0)), ("b", random(r, &[2, 4], 1.0, 2.0))]),
        |g, l, _| {
            g.row_mse(l["a"], l["b"])
        },
    );
    // curvature of the normalisation dominates at larger steps
    check_eps(
        "row_cosine_distance",
        3e-3,
        |r| pt(vec![("a", random(r, &[2, 4], -1.0, 1.0)), ("b", random(r, &[2, 4], -1.0, 1.0))]),
        |g, l, _| {
            g.row_cosine_distance(l["a"], l["b"])
        },
    );
}

#[test]
fn linear_algebra_ops() {
    check(
        "matmul",
        |r| pt(vec![("x", random(r, &[2, 3, 4], -1.0, 1.0)), ("w", random(r, &[4, 5], -1.0, 1.0))]),
        |g, l, _| {
            g.matmul(l["x"], l["w"])
        },
    );
    check(
        "embedding",
        |r| pt(vec![("table", random(r, &[5, 3], -1.0, 1.0))]),
        |g, l, s| {
            let ids = [(s % 5) as usize, 2, 2, 4];
            g.embedding(l["table"], &ids, &[2, 2])
        },
    );
    check(
        "causal_attention",
        |r| {
            pt(vec![
                ("q", random(r, &[2, 3, 4], -1.0, 1.0)),
                ("k", random(r, &[2, 3, 4], -1.0, 1.0)),
                ("v", random(r, &[2, 3, 4], -1.0, 1.0)),
            ])
        },
        |g, l, _| {
            g.causal_attention(l["q"], l["k"], l["v"], 2)
        },
    );
}

#[test]
fn lerp_scalar_and_per_row() {
    check(
        "lerp_scalar",
        |r| {
            pt(vec![
                ("pre", random(r, &[2, 4], -1.0, 1.0)),
                ("exp", random(r, &[2, 4], -1.0, 1.0)),
                ("alpha", random(r, &[1], 0.1, 0.9)),
            ])
        },
        |g, l, _| {
            g.lerp(l["pre"], l["exp"], l["alpha"])
        },
    );
    check(
        "lerp_rows",
        |r| {
            pt(vec![
                ("pre", random(r, &[2, 3, 4], -1.0, 1.0)),
                ("exp", random(r, &[2, 3, 4], -1.0, 1.0)),
                ("alpha", random(r, &[2, 3, 1], 0.1, 0.9)),
            ])
        },
        |g, l, _| {
            g.lerp(l["pre"], l["exp"], l["alpha"])
        },
    );
}

/// Analytic gradient from one graph, numeric from another.
struct Split {
    analytic: GraphObjective<f32>,
    numeric: GraphObjective<f32>,
}

impl Objective for Split {
    fn value(&mut self, p: &Point) -> Result<f64> {
        self.numeric.value(p)
    }
    fn gradient(&mut self, p: &Point) -> Result<Point> {
        self.analytic.gradient(p)
    }
    fn quantize(&self, v: f64) -> f64 {
        self.numeric.quantize(v)
    }
}

fn check_surrogate(
    label: &str,
    point_fn: impl Fn(&mut ChaCha8Rng) -> Point,
    hard: impl Fn(&mut Graph<'static, f32>, &Leaves) -> Result<NodeId> + Clone + 'static,
    soft: impl Fn(&mut Graph<'static, f32>, &Leaves) -> Result<NodeId> + Clone + 'static,
) {
    for trial in 0..TRIALS {
        let mut rng = ChaCha8Rng::seed_from_u64(trial);
        let point = point_fn(&mut rng);
        let w = seed(&mut rng, &output_shape(&hard, &point));
        let mut obj = Split {
            analytic: GraphObjective::new(hard.clone()).with_seed(w.clone()),
            numeric: GraphObjective::new(soft.clone()).with_seed(w),
        };
        let report = finite_diff_check(&mut obj, &point, EPS).unwrap();
        assert!(report.passed, "{label} trial {trial}: {:?}", report.worst());
    }
}

/// `probs[.., 1]` as a `[rows, 1]` column.
fn second_column(g: &mut Graph<'static, f32>, probs: NodeId) -> Result<NodeId> {
    let pick = g.constant(Tensor::new(vec![2, 1], vec![0.0, 1.0])?);
    g.matmul(probs, pick)
}

/// Hard selection is piecewise constant in the gate, so its straight-through
/// backward is checked against the soft blend it stands in for.
#[test]
fn moe_straight_through_matches_soft_surrogate() {
    check_surrogate(
        "moe_select",
        |r| {
            pt(vec![
                ("pre", random(r, &[3, 4], -1.0, 1.0)),
                ("exp", random(r, &[3, 4], -1.0, 1.0)),
                ("logits", random(r, &[3, 2], -1.0, 1.0)),
            ])
        },
        |g, l| {
            let probs = g.softmax(l["logits"])?;
            g.moe_select(l["pre"], l["exp"], probs)
        },
        |g, l| {
            let probs = g.softmax(l["logits"])?;
            let p1 = second_column(g, probs)?;
            g.lerp(l["pre"], l["exp"], p1)
        },
    );
}

#[test]
fn hard_gate_straight_through_matches_probability() {
    check_surrogate(
        "hard_gate",
        |r| pt(vec![("logits", random(r, &[4, 2], -1.0, 1.0))]),
        |g, l| {
            let probs = g.softmax(l["logits"])?;
            g.hard_gate(probs)
        },
        |g, l| {
            let probs = g.softmax(l["logits"])?;
            second_column(g, probs)
        },
    );
}
