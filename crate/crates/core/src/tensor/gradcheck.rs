use std::collections::BTreeMap;
use std::marker::PhantomData;

use serde::Serialize;

use super::{Graph, NodeId, Real, Tensor};
use crate::error::{Error, Result};

/// A scalar function of named tensors with an analytic gradient.
pub trait Objective {
    fn value(&mut self, point: &BTreeMap<String, Tensor<f64>>) -> Result<f64>;

    fn gradient(
        &mut self,
        point: &BTreeMap<String, Tensor<f64>>,
    ) -> Result<BTreeMap<String, Tensor<f64>>>;

    /// Rounds a coordinate to the precision the objective actually evaluates in.
    fn quantize(&self, v: f64) -> f64 {
        v
    }
}

type Builder<T> =
    dyn Fn(&mut Graph<'static, T>, &BTreeMap<String, NodeId>) -> Result<NodeId>;

/// [`Objective`] backed by a [`Graph`] built once and re-evaluated on each query.
pub struct GraphObjective<T: Real> {
    build: Box<Builder<T>>,
    cached: Option<(Graph<'static, T>, NodeId)>,
    seed: Option<Tensor<f64>>,
    _marker: PhantomData<T>,
}

impl<T: Real> GraphObjective<T> {
    /// `build` receives one gradient-carrying leaf per point entry and returns the scalar loss.
    pub fn new(
        build: impl Fn(&mut Graph<'static, T>, &BTreeMap<String, NodeId>) -> Result<NodeId> + 'static,
    ) -> Self {
        GraphObjective {
            build: Box::new(build),
            cached: None,
            seed: None,
            _marker: PhantomData,
        }
    }

    /// Reads a non-scalar output as `sum(seed * out)`, with the sum taken in `f64`.
    ///
    /// Keeps the rounding of a final low-precision reduction out of the
    /// difference quotient, so the check measures the ops themselves.
    pub fn with_seed(mut self, seed: Tensor<f64>) -> Self {
        self.seed = Some(seed);
        self
    }

    fn evaluated(&mut self, point: &BTreeMap<String, Tensor<f64>>) -> Result<(&Graph<'static, T>, NodeId)> {
        let bindings: BTreeMap<String, Tensor<T>> =
            point.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        match &mut self.cached {
            Some((graph, _)) => graph.evaluate(&bindings)?,
            None => {
                let mut graph = Graph::new();
                let leaves = bindings
                    .into_iter()
                    .map(|(k, v)| {
                        let id = graph.param(&k, std::borrow::Cow::Owned(v), true);
                        (k, id)
                    })
                    .collect();
                let loss = (self.build)(&mut graph, &leaves)?;
                self.cached = Some((graph, loss));
            }
        }
        let (graph, loss) = self.cached.as_ref().expect("graph built above");
        Ok((graph, *loss))
    }
}

impl<T: Real> Objective for GraphObjective<T> {
    fn value(&mut self, point: &BTreeMap<String, Tensor<f64>>) -> Result<f64> {
        let seed = self.seed.clone();
        let (graph, loss) = self.evaluated(point)?;
        let v = graph.value(loss);
        match seed {
            Some(seed) => {
                if seed.shape() != v.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "seed",
                        left: v.shape().to_vec(),
                        right: seed.shape().to_vec(),
                    });
                }
                Ok(v.data().iter().zip(seed.data()).map(|(a, w)| a.f64() * w).sum())
            }
            None if v.numel() != 1 => Err(Error::NotScalar(v.shape().to_vec())),
            None => Ok(v.item().f64()),
        }
    }

    fn gradient(
        &mut self,
        point: &BTreeMap<String, Tensor<f64>>,
    ) -> Result<BTreeMap<String, Tensor<f64>>> {
        let seed = self.seed.as_ref().map(|t| t.cast::<T>());
        let (graph, loss) = self.evaluated(point)?;
        let grads = match seed {
            Some(seed) => graph.backward_seeded(loss, &seed)?,
            None => graph.backward(loss)?,
        };
        Ok(grads
            .into_map()
            .into_iter()
            .map(|(k, v)| (k, v.cast()))
            .collect())
    }

    fn quantize(&self, v: f64) -> f64 {
        T::of(v).f64()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct ParamGradReport {
    pub name: String,
    /// Worst `|a - f|` divided by the tensor's largest gradient magnitude; decides pass/fail.
    pub max_rel_error: f64,
    /// Worst `|a - f| / max(|a|, |f|, 1e-8)` over single elements.
    pub max_elementwise_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Outcome of comparing analytic gradients against central differences.
#[derive(Clone, Debug, Serialize)]
pub struct GradReport {
    pub epsilon: f64,
    pub tolerance: f64,
    pub params: Vec<ParamGradReport>,
    pub max_rel_error: f64,
    pub max_elementwise_rel_error: f64,
    pub passed: bool,
}

impl GradReport {
    pub fn worst(&self) -> Option<&ParamGradReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-3;

/// Worst elementwise difference, relative to the largest gradient magnitude of the tensor.
///
/// Elements whose true gradient cancels to near zero would otherwise be judged
/// against 32-bit evaluation noise alone.
fn compare(name: &str, analytic: &[f64], numeric: &[f64]) -> ParamGradReport {
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(1e-8f64, |m, v| m.max(v.abs()));
    let (worst_index, diff) = analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs())
        .enumerate()
        .fold((0, 0.0), |best, (i, d)| if d > best.1 { (i, d) } else { best });
    let elementwise = analytic
        .iter()
        .zip(numeric)
        .map(|(a, f)| (a - f).abs() / a.abs().max(f.abs()).max(1e-8))
        .fold(0.0, f64::max);
    ParamGradReport {
        name: name.to_string(),
        max_rel_error: diff / scale,
        max_elementwise_rel_error: elementwise,
        worst_index,
        analytic: analytic[worst_index],
        numeric: numeric[worst_index],
    }
}

/// Central-difference check of every element of every tensor in `point`.
pub fn finite_diff_check(
    objective: &mut impl Objective,
    point: &BTreeMap<String, Tensor<f64>>,
    epsilon: f64,
) -> Result<GradReport> {
    if !(1e-5..=1e-2).contains(&epsilon) {
        return Err(Error::Epsilon(epsilon));
    }
    let first = objective.value(point)?;
    let second = objective.value(point)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic(first, second));
    }
    let analytic = objective.gradient(point)?;

    let mut work = point.clone();
    let mut params = Vec::with_capacity(point.len());
    for (name, base) in point {
        let grad = analytic
            .get(name)
            .ok_or_else(|| Error::UnknownInput(name.clone()))?;
        let mut numeric = Vec::with_capacity(base.numel());
        for i in 0..base.numel() {
            let theta = base.data()[i];
            let hi = objective.quantize(theta + epsilon);
            let lo = objective.quantize(theta - epsilon);
            work.get_mut(name).unwrap().data_mut()[i] = hi;
            let f_hi = objective.value(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = lo;
            let f_lo = objective.value(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = theta;
            numeric.push((f_hi - f_lo) / (hi - lo));
        }
        let report = compare(name, grad.data(), &numeric);
        params.push(report);
    }
    let max_rel_error = params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max);
    let max_elementwise_rel_error = params
        .iter()
        .map(|p| p.max_elementwise_rel_error)
        .fold(0.0, f64::max);
    Ok(GradReport {
        max_elementwise_rel_error,
        epsilon,
        tolerance: DEFAULT_GRAD_TOLERANCE,
        passed: max_rel_error < DEFAULT_GRAD_TOLERANCE,
        params,
        max_rel_error,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point(name: &str, shape: &[usize], data: &[f64]) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([(name.to_string(), Tensor::new(shape.to_vec(), data.to_vec()).unwrap())])
    }

    #[test]
    fn square_at_three() {
        let mut obj = GraphObjective::<f32>::new(|g, leaves| {
            let x = leaves["x"];
            let y = g.mul(x, x)?;
            g.mean(y)
        });
        let report = finite_diff_check(&mut obj, &point("x", &[1], &[3.0]), 1e-3).unwrap();
        assert!(report.passed);
        assert!((report.params[0].analytic - 6.0).abs() < 1e-6);
        assert!(report.max_elementwise_rel_error < 1e-6, "{report:?}");
    }

    struct Corrupted<O>(O);

    impl<O: Objective> Objective for Corrupted<O> {
        fn value(&mut self, p: &BTreeMap<String, Tensor<f64>>) -> Result<f64> {
            self.0.value(p)
        }
        fn gradient(
            &mut self,
            p: &BTreeMap<String, Tensor<f64>>,
        ) -> Result<BTreeMap<String, Tensor<f64>>> {
            let mut g = self.0.gradient(p)?;
            for t in g.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= 2.0);
            }
            Ok(g)
        }
        fn quantize(&self, v: f64) -> f64 {
            self.0.quantize(v)
        }
    }

    #[test]
    fn doubled_gradient_fails() {
        let obj = GraphObjective::<f32>::new(|g, leaves| {
            let x = leaves["x"];
            let y = g.mul(x, x)?;
            g.mean(y)
        });
        let report =
            finite_diff_check(&mut Corrupted(obj), &point("x", &[1], &[3.0]), 1e-3).unwrap();
        assert!(!report.passed);
    }

    struct Flaky(u32);

    impl Objective for Flaky {
        fn value(&mut self, _: &BTreeMap<String, Tensor<f64>>) -> Result<f64> {
            self.0 += 1;
            Ok(self.0 as f64)
        }
        fn gradient(
            &mut self,
            p: &BTreeMap<String, Tensor<f64>>,
        ) -> Result<BTreeMap<String, Tensor<f64>>> {
            Ok(p.clone())
        }
    }

    #[test]
    fn nondeterminism_and_epsilon_are_rejected() {
        let p = point("x", &[1], &[1.0]);
        assert!(matches!(
            finite_diff_check(&mut Flaky(0), &p, 1e-3),
            Err(Error::NonDeterministic(..))
        ));
        assert!(matches!(
            finite_diff_check(&mut Flaky(0), &p, 0.5),
            Err(Error::Epsilon(_))
        ));
    }
}
