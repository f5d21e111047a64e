//! Pre-norm decoder-only transformer with optional expanded layers.

mod store;

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expansion::ExpansionPlan;
use crate::interpolators::{self, DivergenceTerm, FusionInputs};
use crate::tensor::{Graph, NodeId, Real, Tensor};

pub use store::{ParameterStore, StoredTensor};

pub const RMSNORM_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            vocab_size: 64,
            d_model: 64,
            n_heads: 4,
            n_layers: 8,
            d_ff: 256,
            max_seq_len: 32,
            seed: 0,
        }
    }
}

impl ModelSpec {
    /// Lists every violated constraint at once.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("d_ff", self.d_ff),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                errs.push(format!("{name} must be positive"));
            }
        }
        if self.d_model % 2 != 0 {
            errs.push(format!("d_model {} must be even", self.d_model));
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidSpec(errs))
        }
    }

    /// `vocab*d*2 + layers*(4d^2 + 2 d d_ff + 2d) + d`
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d * 2
            + self.n_layers * (4 * d * d + 2 * d * self.d_ff + 2 * d)
            + d
    }

    /// Canonical tensor names with their shapes, in initialisation order.
    pub fn tensor_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let mut out = vec![("tok_emb".to_string(), vec![self.vocab_size, d])];
        for i in 0..self.n_layers {
            for (kind, shape) in self.block_shapes() {
                out.push((layer_name(kind, i), shape));
            }
        }
        out.push(("final_norm".into(), vec![d]));
        out.push(("lm_head".into(), vec![d, self.vocab_size]));
        out
    }

    /// Per-block tensor kinds and shapes.
    pub fn block_shapes(&self) -> Vec<(&'static str, Vec<usize>)> {
        let (d, f) = (self.d_model, self.d_ff);
        vec![
            ("attn_norm", vec![d]),
            ("q_proj", vec![d, d]),
            ("k_proj", vec![d, d]),
            ("v_proj", vec![d, d]),
            ("o_proj", vec![d, d]),
            ("mlp_norm", vec![d]),
            ("up_proj", vec![d, f]),
            ("down_proj", vec![f, d]),
        ]
    }
}

pub const BLOCK_TENSORS: [&str; 8] = [
    "attn_norm",
    "q_proj",
    "k_proj",
    "v_proj",
    "o_proj",
    "mlp_norm",
    "up_proj",
    "down_proj",
];

/// `<kind>.<layer>`, e.g. `q_proj.3`.
pub fn layer_name(kind: &str, layer: usize) -> String {
    format!("{kind}.{layer}")
}

/// `branch.<layer>.<kind>`.
pub fn branch_name(kind: &str, layer: usize) -> String {
    format!("branch.{layer}.{kind}")
}

/// Seeded initialisation: linear weights from a normal with std 0.02 truncated
/// at two standard deviations, norm gains at one.
pub fn init_model(spec: &ModelSpec) -> Result<ParameterStore> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, INIT_STD).expect("positive std");
    let mut store = ParameterStore::new();
    for (name, shape) in spec.tensor_shapes() {
        let t = if name.contains("norm") {
            Tensor::full(&shape, 1.0)
        } else {
            Tensor::from_fn(&shape, |_| loop {
                let v: f64 = normal.sample(&mut rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break v as f32;
                }
            })
        };
        store.insert(name, t, false);
    }
    Ok(store)
}

/// Checks that `store` holds every canonical tensor with the right shape.
pub fn check_store(spec: &ModelSpec, store: &ParameterStore) -> Result<()> {
    for (name, shape) in spec.tensor_shapes() {
        store.expect_shape(&name, &shape)?;
    }
    Ok(())
}

/// Fixed sinusoidal position table `[max_seq_len, d_model]`.
pub fn position_table(spec: &ModelSpec) -> Tensor {
    let d = spec.d_model;
    Tensor::from_fn(&[spec.max_seq_len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 1.0 / 10_000f64.powf((2 * (j / 2)) as f64 / d as f64);
        let v = if j % 2 == 0 { (pos * freq).sin() } else { (pos * freq).cos() };
        v as f32
    })
}

/// A `[batch, seq]` block of token ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub seq: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn new(batch: usize, seq: usize, ids: Vec<u32>) -> Result<Self> {
        if batch == 0 || seq == 0 || ids.len() != batch * seq {
            return Err(Error::InvalidTensor(format!(
                "token batch [{batch}, {seq}] cannot hold {} ids",
                ids.len()
            )));
        }
        Ok(TokenBatch { batch, seq, ids })
    }

    /// Stacks equal-length rows.
    pub fn from_rows(rows: &[Vec<u32>]) -> Result<Self> {
        let seq = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != seq) {
            return Err(Error::InvalidTensor("token rows differ in length".into()));
        }
        TokenBatch::new(rows.len(), seq, rows.concat())
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.seq..(b + 1) * self.seq]
    }

    fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.seq > spec.max_seq_len {
            return Err(Error::SequenceTooLong {
                len: self.seq,
                max: spec.max_seq_len,
            });
        }
        if let Some(i) = self.ids.iter().position(|&t| t as usize >= spec.vocab_size) {
            return Err(Error::TokenOutOfRange {
                position: i % self.seq,
                id: self.ids[i],
                vocab: spec.vocab_size,
            });
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BranchKind {
    /// Parallel copy fused with the original by an interpolator.
    Concat,
    /// Extra layer inserted after the original.
    Stack,
}

/// Hidden states of one expanded layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTrace {
    pub layer: usize,
    pub branch: BranchKind,
    /// `[batch, seq, d_model]` output of the frozen block.
    pub h_pre: Tensor,
    /// `[batch, seq, d_model]` output of the expanded block.
    pub h_exp: Tensor,
    /// `[batch, seq]` blend weight; absent for stacked layers.
    pub alpha: Option<Tensor>,
    pub combined: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HiddenTrace {
    pub layers: Vec<LayerTrace>,
}

impl HiddenTrace {
    pub fn layer(&self, index: usize) -> Option<&LayerTrace> {
        self.layers.iter().find(|l| l.layer == index)
    }
}

/// Computation inside each block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BlockForm {
    #[default]
    Full,
    /// `x + down(act(up(x)))` with every norm replaced by identity and
    /// attention bypassed; `act` is GELU or identity. Used to isolate the MLP
    /// when comparing weight-space and activation-space blends.
    MlpOnly { gelu: bool },
}

/// Which weights a forward pass reads and how.
#[derive(Clone, Copy, Debug)]
pub struct ModelView<'a> {
    pub spec: &'a ModelSpec,
    pub store: &'a ParameterStore,
    pub plan: Option<&'a ExpansionPlan>,
    /// Replaces the fixed blend weight of every lerp layer.
    pub alpha_override: Option<f64>,
    pub form: BlockForm,
}

impl<'a> ModelView<'a> {
    pub fn base(spec: &'a ModelSpec, store: &'a ParameterStore) -> Self {
        ModelView {
            spec,
            store,
            plan: None,
            alpha_override: None,
            form: BlockForm::Full,
        }
    }

    pub fn with_plan(mut self, plan: Option<&'a ExpansionPlan>) -> Self {
        self.plan = plan;
        self
    }
}

/// Graph nodes of one expanded layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerNodes {
    pub layer: usize,
    pub branch: BranchKind,
    pub pre: NodeId,
    pub exp: NodeId,
    pub alpha: Option<NodeId>,
    pub combined: NodeId,
}

/// Nodes produced by [`build_forward`].
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    /// `[batch, seq, vocab]`
    pub logits: NodeId,
    pub layers: Vec<LayerNodes>,
}

impl ForwardNodes {
    /// Divergence terms for every interpolated layer.
    pub fn divergence_terms(&self) -> Vec<DivergenceTerm> {
        self.layers
            .iter()
            .filter(|l| l.branch == BranchKind::Concat)
            .map(|l| DivergenceTerm {
                pre: l.pre,
                exp: l.exp,
                alpha: l.alpha,
            })
            .collect()
    }
}

struct Leaves<'a, 's> {
    store: &'a ParameterStore,
    trainable: Option<&'s BTreeSet<String>>,
}

impl<'a> Leaves<'a, '_> {
    fn get<T: Real>(&self, g: &mut Graph<'a, T>, name: &str) -> Result<NodeId> {
        let t = self.store.tensor(name)?;
        let grad = self.trainable.is_some_and(|s| s.contains(name));
        Ok(g.param_from_store(name, t, grad))
    }
}

/// Records a forward pass into `g`. Leaves named in `trainable` carry gradients.
pub fn build_forward<'a, T: Real>(
    g: &mut Graph<'a, T>,
    view: &ModelView<'a>,
    tokens: &TokenBatch,
    trainable: Option<&BTreeSet<String>>,
) -> Result<ForwardNodes> {
    let spec = view.spec;
    tokens.validate(spec)?;
    if let Some(plan) = view.plan {
        if plan.n_layers != spec.n_layers {
            return Err(Error::Plan(format!(
                "plan covers {} layers, model has {}",
                plan.n_layers, spec.n_layers
            )));
        }
    }
    let leaves = Leaves {
        store: view.store,
        trainable,
    };
    let (b, s, d) = (tokens.batch, tokens.seq, spec.d_model);

    let emb = leaves.get(g, "tok_emb")?;
    let ids: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
    let x = g.embedding(emb, &ids, &[b, s])?;
    let table = position_table(spec);
    let pos = g.constant(Tensor::from_fn(&[s, d], |i| T::of(table.data()[i] as f64)));
    let mut x = g.add_broadcast(x, pos)?;

    let mut layers = Vec::new();
    for i in 0..spec.n_layers {
        let branch = view.plan.and_then(|p| p.branch_at(i));
        let form = view.form;
        let pre = block(g, &leaves, spec, form, x, &|k| layer_name(k, i))?;
        x = match branch {
            None => pre,
            Some(BranchKind::Stack) => {
                let exp = block(g, &leaves, spec, form, pre, &|k| branch_name(k, i))?;
                layers.push(LayerNodes {
                    layer: i,
                    branch: BranchKind::Stack,
                    pre,
                    exp,
                    alpha: None,
                    combined: exp,
                });
                exp
            }
            Some(BranchKind::Concat) => {
                let plan = view.plan.expect("branch implies plan");
                let exp = block(g, &leaves, spec, form, x, &|k| branch_name(k, i))?;
                let fused = interpolators::fuse(
                    g,
                    plan.interpolator.kind,
                    FusionInputs { input: x, pre, exp },
                    view.alpha_override,
                    &mut |g, name| leaves.get(g, &interpolators::interp_name(i, name)),
                )?;
                layers.push(LayerNodes {
                    layer: i,
                    branch: BranchKind::Concat,
                    pre,
                    exp,
                    alpha: Some(fused.alpha),
                    combined: fused.out,
                });
                fused.out
            }
        };
    }
    let h = match view.form {
        BlockForm::Full => {
            let norm = leaves.get(g, "final_norm")?;
            g.rmsnorm(x, norm, RMSNORM_EPS)?
        }
        BlockForm::MlpOnly { .. } => x,
    };
    let head = leaves.get(g, "lm_head")?;
    let logits = g.matmul(h, head)?;
    Ok(ForwardNodes { logits, layers })
}

/// `x + attn(norm(x))`, then `+ mlp(norm(.))`; tensor names come from `name`.
fn block<'a, T: Real>(
    g: &mut Graph<'a, T>,
    leaves: &Leaves<'a, '_>,
    spec: &ModelSpec,
    form: BlockForm,
    x: NodeId,
    name: &dyn Fn(&str) -> String,
) -> Result<NodeId> {
    let p = |g: &mut Graph<'a, T>, k: &str| leaves.get(g, &name(k));
    if let BlockForm::MlpOnly { gelu } = form {
        let (up, down) = (p(g, "up_proj")?, p(g, "down_proj")?);
        let h = g.matmul(x, up)?;
        let h = if gelu { g.gelu(h)? } else { h };
        let h = g.matmul(h, down)?;
        return g.add(x, h);
    }
    let attn_norm = p(g, "attn_norm")?;
    let h = g.rmsnorm(x, attn_norm, RMSNORM_EPS)?;
    let (wq, wk, wv, wo) = (p(g, "q_proj")?, p(g, "k_proj")?, p(g, "v_proj")?, p(g, "o_proj")?);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let a = g.causal_attention(q, k, v, spec.n_heads)?;
    let a = g.matmul(a, wo)?;
    let x = g.add(x, a)?;

    let mlp_norm = p(g, "mlp_norm")?;
    let h = g.rmsnorm(x, mlp_norm, RMSNORM_EPS)?;
    let (up, down) = (p(g, "up_proj")?, p(g, "down_proj")?);
    let h = g.matmul(h, up)?;
    let h = g.gelu(h)?;
    let h = g.matmul(h, down)?;
    g.add(x, h)
}

/// Logits `[batch, seq, vocab]` and, when `capture` is set, the hidden states
/// of every expanded layer.
pub fn forward(
    view: &ModelView<'_>,
    tokens: &TokenBatch,
    capture: bool,
) -> Result<(Tensor, Option<HiddenTrace>)> {
    let mut g = Graph::<f32>::new();
    let nodes = build_forward(&mut g, view, tokens, None)?;
    let logits = g.value(nodes.logits).clone();
    let trace = capture.then(|| trace_from(&g, &nodes, tokens));
    Ok((logits, trace))
}

pub(crate) fn trace_from(g: &Graph<'_, f32>, nodes: &ForwardNodes, tokens: &TokenBatch) -> HiddenTrace {
    let rows = [tokens.batch, tokens.seq];
    let layers = nodes
        .layers
        .iter()
        .map(|l| {
            let alpha = l.alpha.map(|a| {
                let v = g.value(a);
                if v.numel() == 1 {
                    Tensor::full(&rows, v.item())
                } else {
                    Tensor::from_parts(rows.to_vec(), v.data().to_vec())
                }
            });
            LayerTrace {
                layer: l.layer,
                branch: l.branch,
                h_pre: g.value(l.pre).clone(),
                h_exp: g.value(l.exp).clone(),
                alpha,
                combined: g.value(l.combined).clone(),
            }
        })
        .collect();
    HiddenTrace { layers }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    /// Prompt followed by the generated tokens.
    pub tokens: Vec<u32>,
    /// Generation stopped early at `max_seq_len`.
    pub truncated: bool,
}

/// Argmax decoding; ties go to the lower token id.
pub fn greedy_decode(view: &ModelView<'_>, prompt: &[u32], max_new: usize) -> Result<Decoded> {
    let mut out = greedy_decode_batch(view, &[prompt.to_vec()], max_new)?;
    Ok(out.pop().expect("one prompt in, one result out"))
}

/// [`greedy_decode`] over equal-length prompts in one batch.
pub fn greedy_decode_batch(
    view: &ModelView<'_>,
    prompts: &[Vec<u32>],
    max_new: usize,
) -> Result<Vec<Decoded>> {
    let len = prompts.first().map_or(0, Vec::len);
    if len == 0 {
        return Err(Error::InvalidTensor("prompt must be non-empty".into()));
    }
    let max = view.spec.max_seq_len;
    if len > max {
        return Err(Error::SequenceTooLong { len, max });
    }
    let steps = max_new.min(max - len);
    let truncated = steps < max_new;
    let mut rows: Vec<Vec<u32>> = prompts.to_vec();
    for _ in 0..steps {
        let batch = TokenBatch::from_rows(&rows)?;
        let (logits, _) = forward(view, &batch, false)?;
        let (seq, vocab) = (batch.seq, view.spec.vocab_size);
        for (b, row) in rows.iter_mut().enumerate() {
            let off = (b * seq + seq - 1) * vocab;
            row.push(argmax(&logits.data()[off..off + vocab]) as u32);
        }
    }
    Ok(rows
        .into_iter()
        .map(|tokens| Decoded { tokens, truncated })
        .collect())
}

/// [`greedy_decode_batch`] seeded with a guessed continuation per prompt.
/// Each round scores prompt plus guess in one pass, keeps the prefix the
/// model agrees with plus its next choice, and takes the model's remaining
/// predictions as the new guess. The result equals plain greedy decoding; a
/// correct guess costs a single pass.
pub fn greedy_decode_drafted(
    view: &ModelView<'_>,
    prompts: &[Vec<u32>],
    drafts: &[Vec<u32>],
    max_new: usize,
) -> Result<Vec<Decoded>> {
    let len = prompts.first().map_or(0, Vec::len);
    if len == 0 {
        return Err(Error::InvalidTensor("prompt must be non-empty".into()));
    }
    if drafts.len() != prompts.len() {
        return Err(Error::InvalidTensor(format!(
            "{} drafts for {} prompts",
            drafts.len(),
            prompts.len()
        )));
    }
    let max = view.spec.max_seq_len;
    if len > max {
        return Err(Error::SequenceTooLong { len, max });
    }
    let steps = max_new.min(max - len);
    let truncated = steps < max_new;
    let mut guess: Vec<Vec<u32>> = drafts
        .iter()
        .map(|d| (0..steps).map(|j| d.get(j).copied().unwrap_or(0)).collect())
        .collect();
    let mut confirmed = vec![0usize; prompts.len()];
    let vocab = view.spec.vocab_size;
    loop {
        let active: Vec<usize> = (0..prompts.len()).filter(|&b| confirmed[b] < steps).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<Vec<u32>> = active
            .iter()
            .map(|&b| [prompts[b].as_slice(), &guess[b][..steps - 1]].concat())
            .collect();
        let batch = TokenBatch::from_rows(&rows)?;
        let (logits, _) = forward(view, &batch, false)?;
        for (r, &b) in active.iter().enumerate() {
            let pred = |j: usize| {
                let off = (r * batch.seq + len - 1 + j) * vocab;
                argmax(&logits.data()[off..off + vocab]) as u32
            };
            let mut j = confirmed[b];
            loop {
                let p = pred(j);
                let agreed = guess[b][j] == p;
                guess[b][j] = p;
                j += 1;
                if !agreed || j == steps {
                    break;
                }
            }
            confirmed[b] = j;
            for k in j..steps {
                guess[b][k] = pred(k);
            }
        }
    }
    Ok(prompts
        .iter()
        .zip(guess)
        .map(|(p, g)| Decoded {
            tokens: [p.as_slice(), &g].concat(),
            truncated,
        })
        .collect())
}

/// First index of the maximum.
pub fn argmax(v: &[f32]) -> usize {
    v.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
        .0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelSpec {
        ModelSpec {
            vocab_size: 11,
            d_model: 8,
            n_heads: 2,
            n_layers: 2,
            d_ff: 16,
            max_seq_len: 6,
            seed: 5,
        }
    }

    #[test]
    fn default_param_count_matches_store() {
        let spec = ModelSpec::default();
        let store = init_model(&spec).unwrap();
        assert_eq!(spec.param_count(), 402_496);
        assert_eq!(store.numel(), spec.param_count());
        assert_eq!(store.len(), 3 + 8 * 8);
        check_store(&spec, &store).unwrap();
    }

    #[test]
    fn init_is_seeded() {
        let spec = tiny();
        let a = init_model(&spec).unwrap();
        assert!(a.bit_eq(&init_model(&spec).unwrap()));
        let other = init_model(&ModelSpec { seed: 6, ..spec.clone() }).unwrap();
        assert!(!a.bit_eq(&other));
        let q = a.tensor("q_proj.0").unwrap();
        assert!(q.data().iter().all(|v| v.abs() <= 0.04));
        assert!(a.tensor("attn_norm.1").unwrap().data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn invalid_spec_lists_every_violation() {
        let spec = ModelSpec {
            d_model: 9,
            n_heads: 2,
            d_ff: 0,
            ..ModelSpec::default()
        };
        match spec.validate() {
            Err(Error::InvalidSpec(v)) => assert_eq!(v.len(), 3, "{v:?}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn forward_is_causal() {
        let spec = tiny();
        let store = init_model(&spec).unwrap();
        let view = ModelView::base(&spec, &store);
        let a = TokenBatch::new(1, 5, vec![1, 2, 3, 4, 5]).unwrap();
        let b = TokenBatch::new(1, 5, vec![1, 2, 9, 4, 5]).unwrap();
        let (la, _) = forward(&view, &a, false).unwrap();
        let (lb, _) = forward(&view, &b, false).unwrap();
        let v = spec.vocab_size;
        assert_eq!(la.data()[..2 * v], lb.data()[..2 * v]);
        assert_ne!(la.data()[2 * v..3 * v], lb.data()[2 * v..3 * v]);
    }

    #[test]
    fn forward_rejects_bad_tokens() {
        let spec = tiny();
        let store = init_model(&spec).unwrap();
        let view = ModelView::base(&spec, &store);
        let bad = TokenBatch::new(1, 3, vec![1, 11, 2]).unwrap();
        assert!(matches!(
            forward(&view, &bad, false),
            Err(Error::TokenOutOfRange { position: 1, id: 11, .. })
        ));
        let long = TokenBatch::new(1, 7, vec![1; 7]).unwrap();
        assert!(matches!(forward(&view, &long, false), Err(Error::SequenceTooLong { .. })));
    }

    #[test]
    fn zeroed_output_projections_make_a_layer_identity() {
        let spec = ModelSpec { n_layers: 1, ..tiny() };
        let mut store = init_model(&spec).unwrap();
        for name in ["o_proj.0", "down_proj.0"] {
            store.tensor_mut(name).unwrap().data_mut().fill(0.0);
        }
        let mut g = Graph::<f32>::new();
        let leaves = Leaves {
            store: &store,
            trainable: None,
        };
        let x = g.constant(Tensor::from_fn(&[2, 3, 8], |i| (i as f32 * 0.37).sin()));
        let y = block(&mut g, &leaves, &spec, BlockForm::Full, x, &|k| layer_name(k, 0)).unwrap();
        assert!(g.value(y).bit_eq(g.value(x)));
    }

    #[test]
    fn logits_normalise_and_decode_is_deterministic() {
        let spec = tiny();
        let store = init_model(&spec).unwrap();
        let view = ModelView::base(&spec, &store);
        let batch = TokenBatch::new(2, 3, vec![1, 2, 3, 4, 5, 6]).unwrap();
        let (logits, trace) = forward(&view, &batch, true).unwrap();
        assert_eq!(logits.shape(), &[2, 3, 11]);
        assert!(trace.unwrap().layers.is_empty());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
            let z: f64 = row.iter().map(|&v| (v as f64 - m).exp()).sum();
            let p: f64 = row.iter().map(|&v| (v as f64 - m).exp() / z).sum();
            assert!((p - 1.0).abs() < 1e-6);
        }
        let d = greedy_decode(&view, &[1, 2], 0).unwrap();
        assert_eq!(d.tokens, vec![1, 2]);
        let a = greedy_decode(&view, &[1, 2], 3).unwrap();
        assert_eq!(a, greedy_decode(&view, &[1, 2], 3).unwrap());
        assert_eq!(a.tokens.len(), 5);
        assert!(!a.truncated);
        let t = greedy_decode(&view, &[1, 2, 3], 10).unwrap();
        assert_eq!(t.tokens.len(), 6);
        assert!(t.truncated);
        assert!(greedy_decode(&view, &[], 1).is_err());
    }

    #[test]
    fn drafted_decoding_matches_greedy() {
        let spec = ModelSpec {
            max_seq_len: 12,
            ..tiny()
        };
        let mut store = init_model(&spec).unwrap();
        let names: Vec<String> = store.names().cloned().collect();
        for n in names {
            store.tensor_mut(&n).unwrap().data_mut().iter_mut().for_each(|v| *v *= 40.0);
        }
        let view = ModelView::base(&spec, &store);
        let prompts: Vec<Vec<u32>> = (0..6u32).map(|i| vec![i % 11, (3 * i + 1) % 11, (7 * i + 2) % 11]).collect();
        let want = greedy_decode_batch(&view, &prompts, 7).unwrap();
        let exact: Vec<Vec<u32>> = want.iter().map(|d| d.tokens[3..].to_vec()).collect();
        let mut half = exact.clone();
        half.iter_mut().for_each(|d| d[3] = (d[3] + 1) % 11);
        let zeros = vec![vec![0u32; 7]; 6];
        let short = vec![vec![5u32]; 6];
        for drafts in [exact, half, zeros, short] {
            assert_eq!(greedy_decode_drafted(&view, &prompts, &drafts, 7).unwrap(), want);
        }
        let long = greedy_decode_drafted(&view, &prompts, &vec![vec![]; 6], 20).unwrap();
        assert_eq!(long, greedy_decode_batch(&view, &prompts, 20).unwrap());
        assert!(long[0].truncated);
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        assert_eq!(argmax(&[0.1, 0.5, 0.5, 0.2]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }
}
