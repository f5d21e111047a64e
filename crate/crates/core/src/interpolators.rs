//! Fusion of frozen and expanded hidden states, and the divergence penalty
//! between them.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, NodeId, Real, Tensor};
use crate::transformer::{BranchKind, HiddenTrace, ParameterStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterpolatorKind {
    Lerp,
    Dlerp,
    DlerpIn,
    Moe,
    Plerp,
}

impl InterpolatorKind {
    pub const ALL: [InterpolatorKind; 5] = [
        InterpolatorKind::Lerp,
        InterpolatorKind::Dlerp,
        InterpolatorKind::DlerpIn,
        InterpolatorKind::Moe,
        InterpolatorKind::Plerp,
    ];

    /// Blend weight predicted per token rather than fixed.
    pub fn is_dynamic(self) -> bool {
        matches!(
            self,
            InterpolatorKind::Dlerp | InterpolatorKind::DlerpIn | InterpolatorKind::Moe
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            InterpolatorKind::Lerp => "lerp",
            InterpolatorKind::Dlerp => "dlerp",
            InterpolatorKind::DlerpIn => "dlerpin",
            InterpolatorKind::Moe => "moe",
            InterpolatorKind::Plerp => "plerp",
        }
    }
}

impl fmt::Display for InterpolatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InterpolatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InterpolatorKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown interpolator `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpolatorConfig {
    pub kind: InterpolatorKind,
    /// Blend weight for lerp and plerp.
    pub fixed_alpha: f64,
    pub learnable_alpha: bool,
    /// Keeps dlerp/dlerpin/moe biases frozen at zero.
    pub freeze_bias: bool,
}

impl InterpolatorConfig {
    pub fn new(kind: InterpolatorKind) -> Self {
        InterpolatorConfig {
            kind,
            fixed_alpha: 0.5,
            learnable_alpha: false,
            freeze_bias: true,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.fixed_alpha = alpha;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.fixed_alpha) {
            return Err(Error::Interpolator(format!(
                "alpha {} outside [0, 1]",
                self.fixed_alpha
            )));
        }
        Ok(())
    }
}

impl Default for InterpolatorConfig {
    fn default() -> Self {
        InterpolatorConfig::new(InterpolatorKind::Lerp)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DivergenceKind {
    None,
    Mse,
    Cosine,
}

impl FromStr for DivergenceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(DivergenceKind::None),
            "mse" => Ok(DivergenceKind::Mse),
            "cosine" => Ok(DivergenceKind::Cosine),
            _ => Err(Error::Config(format!("unknown divergence `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    AlphaWeighted,
    Unweighted,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceConfig {
    pub kind: DivergenceKind,
    pub weighting: Weighting,
    pub lambda: f64,
}

impl DivergenceConfig {
    pub fn none() -> Self {
        DivergenceConfig {
            kind: DivergenceKind::None,
            weighting: Weighting::Unweighted,
            lambda: 1.0,
        }
    }

    /// `kind` with the weighting that suits `interpolator`: per-token alpha for
    /// dynamic blends, none for fixed ones.
    pub fn for_interpolator(kind: DivergenceKind, interpolator: InterpolatorKind) -> Self {
        DivergenceConfig {
            kind,
            weighting: if interpolator.is_dynamic() {
                Weighting::AlphaWeighted
            } else {
                Weighting::Unweighted
            },
            lambda: 1.0,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != DivergenceKind::None
    }
}

impl Default for DivergenceConfig {
    fn default() -> Self {
        DivergenceConfig::none()
    }
}

/// Fusion parameters of one expanded layer, keyed by short name.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolatorState {
    pub kind: InterpolatorKind,
    pub tensors: BTreeMap<String, (Tensor, bool)>,
}

impl InterpolatorState {
    /// Parameters that make the blend reproduce the pre-trained branch when the
    /// two branches agree: zero gate weights and biases, identity lateral map.
    pub fn identity(config: &InterpolatorConfig, d_model: usize) -> Result<Self> {
        config.validate()?;
        let d = d_model;
        let mut tensors = BTreeMap::new();
        let mut put = |name: &str, t: Tensor, frozen: bool| {
            tensors.insert(name.to_string(), (t, frozen));
        };
        match config.kind {
            InterpolatorKind::Lerp => {
                put("alpha", Tensor::scalar(config.fixed_alpha as f32), !config.learnable_alpha);
            }
            InterpolatorKind::Plerp => {
                put("alpha", Tensor::scalar(config.fixed_alpha as f32), !config.learnable_alpha);
                put(
                    "w_lateral",
                    Tensor::from_fn(&[d, d], |i| if i / d == i % d { 1.0 } else { 0.0 }),
                    false,
                );
            }
            InterpolatorKind::Dlerp => {
                put("w", Tensor::zeros(&[2 * d, 1]), false);
                put("b", Tensor::zeros(&[1]), config.freeze_bias);
            }
            InterpolatorKind::DlerpIn => {
                put("w_in", Tensor::zeros(&[d, 1]), false);
                put("b_in", Tensor::zeros(&[1]), config.freeze_bias);
            }
            InterpolatorKind::Moe => {
                put("w_g", Tensor::zeros(&[d, 2]), false);
                put("b_g", Tensor::zeros(&[2]), config.freeze_bias);
            }
        }
        Ok(InterpolatorState {
            kind: config.kind,
            tensors,
        })
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .map(|(t, _)| t)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))
    }

    pub fn set(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::MissingParameter(name.to_string()))?;
        if slot.0.shape() != tensor.shape() {
            return Err(Error::ParameterShape {
                name: name.to_string(),
                expected: slot.0.shape().to_vec(),
                found: tensor.shape().to_vec(),
            });
        }
        slot.0 = tensor;
        Ok(())
    }

    /// Writes the tensors as `interp.<layer>.<name>`.
    pub fn install(&self, store: &mut ParameterStore, layer: usize) {
        for (name, (t, frozen)) in &self.tensors {
            store.insert(interp_name(layer, name), t.clone(), *frozen);
        }
    }
}

pub fn interp_name(layer: usize, name: &str) -> String {
    format!("interp.{layer}.{name}")
}

/// Clamps learnable blend weights back into `[0, 1]` after an update.
pub fn project_alphas(store: &mut ParameterStore) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.starts_with("interp.") && n.ends_with(".alpha"))
        .cloned()
        .collect();
    for name in names {
        if let Ok(t) = store.tensor_mut(&name) {
            t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        }
    }
}

/// Graph nodes feeding one fusion.
#[derive(Clone, Copy, Debug)]
pub struct FusionInputs {
    /// Shared input of the layer.
    pub input: NodeId,
    pub pre: NodeId,
    pub exp: NodeId,
}

/// Output of one fusion. `alpha` is `[1]` for fixed blends, `[.., 1]` per token otherwise.
#[derive(Clone, Copy, Debug)]
pub struct Fused {
    pub out: NodeId,
    pub alpha: NodeId,
}

/// Records the fusion of `kind` into `g`. `param` resolves a short tensor name
/// (`alpha`, `w_g`, ...) to a leaf; `alpha_override` replaces a fixed alpha.
pub fn fuse<'a, T: Real>(
    g: &mut Graph<'a, T>,
    kind: InterpolatorKind,
    io: FusionInputs,
    alpha_override: Option<f64>,
    param: &mut dyn FnMut(&mut Graph<'a, T>, &str) -> Result<NodeId>,
) -> Result<Fused> {
    let fixed_alpha = |g: &mut Graph<'a, T>, param: &mut dyn FnMut(&mut Graph<'a, T>, &str) -> Result<NodeId>| -> Result<NodeId> {
        let alpha = match alpha_override {
            Some(a) => g.constant(Tensor::scalar(T::of(a))),
            None => param(g, "alpha")?,
        };
        let a = g.value(alpha).item().f64();
        if !(0.0..=1.0).contains(&a) {
            return Err(Error::Interpolator(format!("alpha {a} outside [0, 1]")));
        }
        Ok(alpha)
    };
    match kind {
        InterpolatorKind::Lerp => {
            let alpha = fixed_alpha(g, param)?;
            let out = g.lerp(io.pre, io.exp, alpha)?;
            Ok(Fused { out, alpha })
        }
        InterpolatorKind::Plerp => {
            let alpha = fixed_alpha(g, param)?;
            let w = param(g, "w_lateral")?;
            let lateral = g.matmul(io.pre, w)?;
            let out = g.lerp(lateral, io.exp, alpha)?;
            Ok(Fused { out, alpha })
        }
        InterpolatorKind::Dlerp => {
            let both = g.concat(io.pre, io.exp)?;
            let (w, b) = (param(g, "w")?, param(g, "b")?);
            let alpha = gate_alpha(g, both, w, b)?;
            let out = g.lerp(io.pre, io.exp, alpha)?;
            Ok(Fused { out, alpha })
        }
        InterpolatorKind::DlerpIn => {
            let (w, b) = (param(g, "w_in")?, param(g, "b_in")?);
            let alpha = gate_alpha(g, io.input, w, b)?;
            let out = g.lerp(io.pre, io.exp, alpha)?;
            Ok(Fused { out, alpha })
        }
        InterpolatorKind::Moe => {
            let (w, b) = (param(g, "w_g")?, param(g, "b_g")?);
            let logits = g.matmul(io.input, w)?;
            let logits = g.add_broadcast(logits, b)?;
            let probs = g.softmax(logits)?;
            let out = g.moe_select(io.pre, io.exp, probs)?;
            let alpha = g.hard_gate(probs)?;
            Ok(Fused { out, alpha })
        }
    }
}

/// `sigmoid(x w + b)`, one value per row.
fn gate_alpha<T: Real>(g: &mut Graph<'_, T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let z = g.matmul(x, w)?;
    let z = g.add_broadcast(z, b)?;
    g.sigmoid(z)
}

/// Per-token distance of one term, alpha-weighted when configured.
pub fn divergence_rows<T: Real>(g: &mut Graph<'_, T>, config: &DivergenceConfig, term: &DivergenceTerm) -> Result<NodeId> {
    let delta = match config.kind {
        DivergenceKind::Mse => g.row_mse(term.pre, term.exp)?,
        DivergenceKind::Cosine => g.row_cosine_distance(term.pre, term.exp)?,
        DivergenceKind::None => return Err(Error::Divergence("divergence kind is none".into())),
    };
    match config.weighting {
        Weighting::Unweighted => Ok(delta),
        Weighting::AlphaWeighted => {
            let alpha = term.alpha.ok_or_else(|| {
                Error::Divergence("alpha-weighted divergence needs a traced alpha".into())
            })?;
            if g.value(alpha).numel() == 1 {
                g.mul_broadcast(delta, alpha)
            } else {
                let shape = g.shape(delta).to_vec();
                let a = g.reshape(alpha, &shape)?;
                g.mul(delta, a)
            }
        }
    }
}

/// One expanded layer's contribution to the divergence penalty.
#[derive(Clone, Copy, Debug)]
pub struct DivergenceTerm {
    pub pre: NodeId,
    pub exp: NodeId,
    pub alpha: Option<NodeId>,
}

/// Mean over layers of the (optionally alpha-weighted) per-token distance,
/// averaged over batch and sequence. `None` when the penalty is disabled or
/// there are no terms.
pub fn divergence_node<T: Real>(
    g: &mut Graph<'_, T>,
    config: &DivergenceConfig,
    terms: &[DivergenceTerm],
) -> Result<Option<NodeId>> {
    if !config.is_active() || terms.is_empty() {
        return Ok(None);
    }
    let mut total: Option<NodeId> = None;
    for term in terms {
        let weighted = divergence_rows(g, config, term)?;
        let m = g.mean(weighted)?;
        total = Some(match total {
            None => m,
            Some(t) => g.add(t, m)?,
        });
    }
    let total = total.expect("terms is non-empty");
    Ok(Some(g.scale(total, 1.0 / terms.len() as f64)?))
}

/// `task + lambda * divergence`.
pub fn total_loss(task: f64, divergence: f64, lambda: f64) -> Result<f64> {
    if !task.is_finite() || !divergence.is_finite() || !lambda.is_finite() {
        return Err(Error::Divergence(format!(
            "non-finite loss input (task {task}, divergence {divergence}, lambda {lambda})"
        )));
    }
    Ok(task + lambda * divergence)
}

fn check_pair(pre: &Tensor, exp: &Tensor) -> Result<()> {
    if pre.shape() != exp.shape() {
        return Err(Error::ShapeMismatch {
            op: "combine",
            left: pre.shape().to_vec(),
            right: exp.shape().to_vec(),
        });
    }
    Ok(())
}

/// Runs [`fuse`] on constant inputs and returns `(combined, alpha)`.
fn fuse_tensors(
    state: &InterpolatorState,
    input: &Tensor,
    pre: &Tensor,
    exp: &Tensor,
    alpha_override: Option<f64>,
) -> Result<(Tensor, Tensor)> {
    check_pair(pre, exp)?;
    let mut g = Graph::<f32>::new();
    let io = FusionInputs {
        input: g.constant(input.clone()),
        pre: g.constant(pre.clone()),
        exp: g.constant(exp.clone()),
    };
    let fused = fuse(&mut g, state.kind, io, alpha_override, &mut |g, name| {
        Ok(g.constant(state.tensor(name)?.clone()))
    })?;
    Ok((g.value(fused.out).clone(), g.value(fused.alpha).clone()))
}

/// `(1 - alpha) * h_pre + alpha * h_exp`.
pub fn lerp_combine(h_pre: &Tensor, h_exp: &Tensor, alpha: f64) -> Result<Tensor> {
    let state = InterpolatorState::identity(&InterpolatorConfig::new(InterpolatorKind::Lerp), 1)?;
    fuse_tensors(&state, h_pre, h_pre, h_exp, Some(alpha)).map(|(out, _)| out)
}

/// Per-token `alpha = sigmoid(W [x_pre, x_exp] + b)`; returns the blend and alpha `[.., 1]`.
pub fn dlerp_combine(x_pre: &Tensor, x_exp: &Tensor, state: &InterpolatorState) -> Result<(Tensor, Tensor)> {
    expect_kind(state, InterpolatorKind::Dlerp)?;
    fuse_tensors(state, x_pre, x_pre, x_exp, None)
}

/// Per-token `alpha = sigmoid(W_in h_input + b_in)`.
pub fn dlerpin_combine(
    h_input: &Tensor,
    h_pre: &Tensor,
    h_exp: &Tensor,
    state: &InterpolatorState,
) -> Result<(Tensor, Tensor)> {
    expect_kind(state, InterpolatorKind::DlerpIn)?;
    fuse_tensors(state, h_input, h_pre, h_exp, None)
}

/// Hard per-token choice between branches; returns the rows and the chosen index (0 = pre).
pub fn moe_select(
    h_input: &Tensor,
    h_pre: &Tensor,
    h_exp: &Tensor,
    state: &InterpolatorState,
) -> Result<(Tensor, Vec<u8>)> {
    expect_kind(state, InterpolatorKind::Moe)?;
    let (out, alpha) = fuse_tensors(state, h_input, h_pre, h_exp, None)?;
    Ok((out, alpha.data().iter().map(|&a| a as u8).collect()))
}

/// `(1 - alpha) * (h_pre W_lateral) + alpha * h_exp`.
pub fn plerp_combine(
    h_pre: &Tensor,
    h_exp: &Tensor,
    state: &InterpolatorState,
    alpha: f64,
) -> Result<Tensor> {
    expect_kind(state, InterpolatorKind::Plerp)?;
    fuse_tensors(state, h_pre, h_pre, h_exp, Some(alpha)).map(|(out, _)| out)
}

fn expect_kind(state: &InterpolatorState, kind: InterpolatorKind) -> Result<()> {
    if state.kind != kind {
        return Err(Error::Interpolator(format!(
            "expected {kind} state, got {}",
            state.kind
        )));
    }
    Ok(())
}

/// Divergence penalty over the interpolated layers of a captured trace.
pub fn divergence_loss(trace: &HiddenTrace, config: &DivergenceConfig) -> Result<f64> {
    if !config.is_active() {
        return Ok(0.0);
    }
    let mut g = Graph::<f32>::new();
    let mut terms = Vec::new();
    for layer in trace.layers.iter().filter(|l| l.branch == BranchKind::Concat) {
        let pre = g.constant(layer.h_pre.clone());
        let exp = g.constant(layer.h_exp.clone());
        let alpha = match &layer.alpha {
            Some(a) => {
                let mut shape = a.shape().to_vec();
                shape.push(1);
                Some(g.constant(a.clone().reshape(shape)?))
            }
            None => None,
        };
        terms.push(DivergenceTerm { pre, exp, alpha });
    }
    if terms.is_empty() {
        return Err(Error::Divergence("trace holds no interpolated layers".into()));
    }
    let node = divergence_node(&mut g, config, &terms)?.expect("active with terms");
    Ok(g.value(node).item() as f64)
}
