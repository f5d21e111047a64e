use std::borrow::Cow;
use std::collections::{BTreeMap, HashMap};

use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node inside one [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    /// `b` is broadcast over the leading axes of `a` (or is a single value).
    AddSuffix(NodeId, NodeId),
    MulSuffix(NodeId, NodeId),
    /// `(1 - alpha) * pre + alpha * exp`; alpha is a scalar or one value per row.
    Lerp {
        pre: NodeId,
        exp: NodeId,
        alpha: NodeId,
    },
    /// `[.., k] x [k, n]`
    MatMul(NodeId, NodeId),
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
        lead: Vec<usize>,
    },
    RmsNorm {
        x: NodeId,
        gain: NodeId,
        eps: f64,
    },
    Gelu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    CausalAttention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        mask: Vec<bool>,
    },
    Concat(NodeId, NodeId),
    /// Hard per-row selection between two branches with a soft-blend backward.
    MoeSelect {
        pre: NodeId,
        exp: NodeId,
        probs: NodeId,
    },
    /// Indicator that the second of two gate probabilities wins, shaped `[.., 1]`;
    /// the backward passes straight through to that probability.
    HardGate(NodeId),
    RowMse(NodeId, NodeId),
    RowCosineDistance(NodeId, NodeId),
    Mean(NodeId),
    Reshape(NodeId, Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddSuffix(..) => "add_broadcast",
            Op::MulSuffix(..) => "mul_broadcast",
            Op::HardGate(..) => "hard_gate",
            Op::Lerp { .. } => "lerp",
            Op::MatMul(..) => "matmul",
            Op::Embedding { .. } => "embedding",
            Op::RmsNorm { .. } => "rmsnorm",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::CausalAttention { .. } => "causal_attention",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Concat(..) => "concat",
            Op::MoeSelect { .. } => "moe_select",
            Op::RowMse(..) => "row_mse",
            Op::RowCosineDistance(..) => "row_cosine_distance",
            Op::Mean(..) => "mean",
            Op::Reshape(..) => "reshape",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddSuffix(a, b)
            | Op::MulSuffix(a, b)
            | Op::MatMul(a, b)
            | Op::Concat(a, b)
            | Op::RowMse(a, b)
            | Op::RowCosineDistance(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::Gelu(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Mean(a)
            | Op::HardGate(a)
            | Op::Reshape(a, _) => vec![*a],
            Op::Lerp { pre, exp, alpha } => vec![*pre, *exp, *alpha],
            Op::Embedding { table, .. } => vec![*table],
            Op::RmsNorm { x, gain, .. } => vec![*x, *gain],
            Op::CausalAttention { q, k, v, .. } => vec![*q, *k, *v],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::MoeSelect { pre, exp, probs } => vec![*pre, *exp, *probs],
        }
    }
}

#[derive(Clone, Debug)]
enum Cache<T> {
    None,
    /// Attention probabilities `[b, h, t, s]` or cross-entropy softmax rows.
    Probs(Vec<T>),
    InvRms(Vec<T>),
    /// GELU gate per element, so that gelu(x) = x * gate.
    Gate(Vec<T>),
    Chosen(Vec<u8>),
}

#[derive(Clone, Debug)]
struct Node<'a, T: Real> {
    op: Op,
    value: Cow<'a, Tensor<T>>,
    cache: Cache<T>,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of a scalar with respect to every named leaf that requires them.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real = f32> {
    map: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.map.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn insert(&mut self, name: String, grad: Tensor<T>) {
        self.map.insert(name, grad);
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.map
    }

    /// Euclidean norm over all gradient entries.
    pub fn global_norm(&self) -> f64 {
        self.map
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| v.f64() * v.f64())
            .sum::<f64>()
            .sqrt()
    }
}

/// Eagerly evaluated computation graph recorded for reverse-mode differentiation.
///
/// Every op computes its value when it is added. Named leaves can later be
/// rebound with [`Graph::evaluate`], which replays the recorded ops in order.
#[derive(Debug)]
pub struct Graph<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    names: HashMap<String, NodeId>,
    stale: bool,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            names: HashMap::new(),
            stale: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn op_name(&self, id: NodeId) -> &'static str {
        self.nodes[id.0].op.name()
    }

    pub fn lookup(&self, name: &str) -> Option<NodeId> {
        self.names.get(name).copied()
    }

    /// Unnamed constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(None, Cow::Owned(value), false)
    }

    /// Named leaf. Binding an already-bound name returns the existing node.
    pub fn param(
        &mut self,
        name: &str,
        value: Cow<'a, Tensor<T>>,
        requires_grad: bool,
    ) -> NodeId {
        if let Some(&id) = self.names.get(name) {
            return id;
        }
        let id = self.push_leaf(Some(name.to_string()), value, requires_grad);
        self.names.insert(name.to_string(), id);
        id
    }

    /// Named leaf bound to a stored `f32` weight.
    pub fn param_from_store(
        &mut self,
        name: &str,
        value: &'a Tensor<f32>,
        requires_grad: bool,
    ) -> NodeId {
        if let Some(&id) = self.names.get(name) {
            return id;
        }
        self.param(name, T::from_store(value), requires_grad)
    }

    fn push_leaf(
        &mut self,
        name: Option<String>,
        value: Cow<'a, Tensor<T>>,
        requires_grad: bool,
    ) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            op: Op::Leaf,
            value,
            cache: Cache::None,
            requires_grad,
            name,
        });
        id
    }

    /// Rebinds a named leaf without recomputing; the graph is stale until [`Graph::evaluate`].
    pub fn rebind(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .lookup(name)
            .ok_or_else(|| Error::UnknownInput(name.to_string()))?;
        let node = &mut self.nodes[id.0];
        if node.value.shape() != value.shape() {
            return Err(Error::ShapeMismatch {
                op: "rebind",
                left: node.value.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        node.value = Cow::Owned(value);
        self.stale = true;
        Ok(())
    }

    /// Rebinds the given named leaves and replays every recorded op.
    pub fn evaluate(&mut self, bindings: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        for (name, value) in bindings {
            self.rebind(name, value.clone())?;
        }
        for i in 0..self.nodes.len() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let (value, cache) = self.compute(i, &self.nodes[i].op)?;
            let node = &mut self.nodes[i];
            node.value = Cow::Owned(value);
            node.cache = cache;
        }
        self.stale = false;
        Ok(())
    }

    fn push(&mut self, op: Op) -> Result<NodeId> {
        let index = self.nodes.len();
        let (value, cache) = self.compute(index, &op)?;
        let requires_grad = op.inputs().iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node {
            op,
            value: Cow::Owned(value),
            cache,
            requires_grad,
            name: None,
        });
        Ok(NodeId(index))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> Result<NodeId> {
        self.push(Op::Scale(a, c))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s.
    pub fn add_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::AddSuffix(a, b))
    }

    /// `a * b` where `b`'s shape is a suffix of `a`'s.
    pub fn mul_broadcast(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::MulSuffix(a, b))
    }

    pub fn hard_gate(&mut self, probs: NodeId) -> Result<NodeId> {
        self.push(Op::HardGate(probs))
    }

    pub fn lerp(&mut self, pre: NodeId, exp: NodeId, alpha: NodeId) -> Result<NodeId> {
        self.push(Op::Lerp { pre, exp, alpha })
    }

    pub fn matmul(&mut self, a: NodeId, w: NodeId) -> Result<NodeId> {
        self.push(Op::MatMul(a, w))
    }

    /// Gathers rows of `table` for `ids`; the output has shape `lead + [d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], lead: &[usize]) -> Result<NodeId> {
        self.push(Op::Embedding {
            table,
            ids: ids.to_vec(),
            lead: lead.to_vec(),
        })
    }

    pub fn rmsnorm(&mut self, x: NodeId, gain: NodeId, eps: f64) -> Result<NodeId> {
        self.push(Op::RmsNorm { x, gain, eps })
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Sigmoid(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Softmax(x))
    }

    pub fn causal_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
    ) -> Result<NodeId> {
        self.push(Op::CausalAttention { q, k, v, heads })
    }

    /// Mean negative log-likelihood over rows whose `mask` entry is set.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        mask: &[bool],
    ) -> Result<NodeId> {
        self.push(Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
        })
    }

    pub fn concat(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::Concat(a, b))
    }

    pub fn moe_select(&mut self, pre: NodeId, exp: NodeId, probs: NodeId) -> Result<NodeId> {
        self.push(Op::MoeSelect { pre, exp, probs })
    }

    /// Per-row index chosen by a [`Graph::moe_select`] node (0 = pre, 1 = exp).
    pub fn moe_choices(&self, id: NodeId) -> Option<&[u8]> {
        match &self.nodes[id.0].cache {
            Cache::Chosen(c) => Some(c),
            _ => None,
        }
    }

    pub fn row_mse(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::RowMse(a, b))
    }

    pub fn row_cosine_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push(Op::RowCosineDistance(a, b))
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.push(Op::Mean(x))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.push(Op::Reshape(x, shape.to_vec()))
    }

    fn val(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn compute(&self, index: usize, op: &Op) -> Result<(Tensor<T>, Cache<T>)> {
        let name = op.name();
        let mismatch = |a: &Tensor<T>, b: &Tensor<T>| Error::ShapeMismatch {
            op: name,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        };
        let same = |a: NodeId, b: NodeId| -> Result<(&Tensor<T>, &Tensor<T>)> {
            let (x, y) = (self.val(a), self.val(b));
            if x.shape() != y.shape() {
                return Err(mismatch(x, y));
            }
            Ok((x, y))
        };
        let zip = |a: NodeId, b: NodeId, f: fn(T, T) -> T| -> Result<Tensor<T>> {
            let (x, y) = same(a, b)?;
            Ok(Tensor::from_parts(
                x.shape().to_vec(),
                x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect(),
            ))
        };
        let map = |a: NodeId, f: &dyn Fn(T) -> T| -> Tensor<T> {
            let x = self.val(a);
            Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|&v| f(v)).collect())
        };

        let mut cache = Cache::None;
        let out = match op {
            Op::Leaf => unreachable!("leaves are never recomputed"),
            Op::Add(a, b) => zip(*a, *b, |p, q| p + q)?,
            Op::Sub(a, b) => zip(*a, *b, |p, q| p - q)?,
            Op::Mul(a, b) => zip(*a, *b, |p, q| p * q)?,
            Op::Scale(a, c) => {
                let c = T::of(*c);
                map(*a, &|v| v * c)
            }
            Op::AddSuffix(a, b) | Op::MulSuffix(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (xs, ys) = (x.shape(), y.shape());
                let suffix = ys.len() <= xs.len() && xs[xs.len() - ys.len()..] == *ys;
                if !suffix && y.numel() != 1 {
                    return Err(mismatch(x, y));
                }
                let n = y.numel();
                let is_mul = matches!(op, Op::MulSuffix(..));
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let w = y.data()[i % n];
                        if is_mul {
                            v * w
                        } else {
                            v + w
                        }
                    })
                    .collect();
                Tensor::from_parts(xs.to_vec(), data)
            }
            Op::HardGate(a) => {
                let x = self.val(*a);
                if x.last_dim() != 2 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: x.shape().to_vec(),
                        right: vec![2],
                    });
                }
                let data = (0..x.rows())
                    .map(|r| {
                        let row = x.row(r);
                        if row[1] > row[0] {
                            T::one()
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                let mut shape = x.shape().to_vec();
                *shape.last_mut().unwrap() = 1;
                Tensor::from_parts(shape, data)
            }
            Op::Lerp { pre, exp, alpha } => {
                let (p, e) = same(*pre, *exp)?;
                let a = self.val(*alpha);
                let rows = p.rows();
                let d = p.last_dim();
                if a.numel() != 1 && a.numel() != rows {
                    return Err(mismatch(p, a));
                }
                let per_row = a.numel() != 1;
                let mut data = Vec::with_capacity(p.numel());
                for r in 0..rows {
                    let al = if per_row { a.data()[r] } else { a.data()[0] };
                    let one_minus = T::one() - al;
                    for j in r * d..(r + 1) * d {
                        let (pv, ev) = (p.data()[j], e.data()[j]);
                        // equal inputs blend to themselves exactly, whatever alpha is
                        data.push(if pv == ev { pv } else { one_minus * pv + al * ev });
                    }
                }
                Tensor::from_parts(p.shape().to_vec(), data)
            }
            Op::MatMul(a, w) => {
                let (x, wt) = (self.val(*a), self.val(*w));
                if wt.shape().len() != 2 || x.last_dim() != wt.shape()[0] {
                    return Err(mismatch(x, wt));
                }
                let (m, k, n) = (x.rows(), wt.shape()[0], wt.shape()[1]);
                let mut out = vec![T::zero(); m * n];
                T::gemm(
                    m,
                    k,
                    n,
                    x.data(),
                    k as isize,
                    1,
                    wt.data(),
                    n as isize,
                    1,
                    T::zero(),
                    &mut out,
                );
                let mut shape = x.shape()[..x.shape().len() - 1].to_vec();
                shape.push(n);
                Tensor::from_parts(shape, out)
            }
            Op::Embedding { table, ids, lead } => {
                let t = self.val(*table);
                if t.shape().len() != 2 || lead.iter().product::<usize>() != ids.len() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: t.shape().to_vec(),
                        right: lead.clone(),
                    });
                }
                let (v, d) = (t.shape()[0], t.shape()[1]);
                let mut data = Vec::with_capacity(ids.len() * d);
                for &id in ids {
                    if id >= v {
                        return Err(Error::InvalidTensor(format!(
                            "embedding id {id} out of range for table of {v} rows"
                        )));
                    }
                    data.extend_from_slice(t.row(id));
                }
                let mut shape = lead.clone();
                shape.push(d);
                Tensor::from_parts(shape, data)
            }
            Op::RmsNorm { x, gain, eps } => {
                let (xv, g) = (self.val(*x), self.val(*gain));
                let d = xv.last_dim();
                if g.shape() != [d] {
                    return Err(mismatch(xv, g));
                }
                let rows = xv.rows();
                let mut inv = Vec::with_capacity(rows);
                let mut data = Vec::with_capacity(xv.numel());
                for r in 0..rows {
                    let row = xv.row(r);
                    let ms = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>() / d as f64;
                    let ri = T::of(1.0 / (ms + eps).sqrt());
                    inv.push(ri);
                    data.extend(row.iter().zip(g.data()).map(|(&v, &gj)| v * ri * gj));
                }
                cache = Cache::InvRms(inv);
                Tensor::from_parts(xv.shape().to_vec(), data)
            }
            Op::Gelu(a) => {
                let x = self.val(*a);
                let gate: Vec<T> = x.data().iter().map(|&v| gelu_gate(v)).collect();
                let data = x.data().iter().zip(&gate).map(|(&v, &s)| v * s).collect();
                cache = Cache::Gate(gate);
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::Sigmoid(a) => map(*a, &sigmoid),
            Op::Softmax(a) => {
                let x = self.val(*a);
                let d = x.last_dim();
                let mut data = Vec::with_capacity(x.numel());
                for r in 0..x.rows() {
                    softmax_row(x.row(r), &mut data);
                }
                debug_assert_eq!(data.len(), x.rows() * d);
                Tensor::from_parts(x.shape().to_vec(), data)
            }
            Op::CausalAttention { q, k, v, heads } => {
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                if qv.shape() != kv.shape() {
                    return Err(mismatch(qv, kv));
                }
                if qv.shape() != vv.shape() {
                    return Err(mismatch(qv, vv));
                }
                if qv.shape().len() != 3 || *heads == 0 || qv.last_dim() % heads != 0 {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: qv.shape().to_vec(),
                        right: vec![*heads],
                    });
                }
                let (out, probs) = attention_forward(qv, kv, vv, *heads);
                cache = Cache::Probs(probs);
                out
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                let x = self.val(*logits);
                let (rows, v) = (x.rows(), x.last_dim());
                if targets.len() != rows || mask.len() != rows {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        left: x.shape().to_vec(),
                        right: vec![targets.len(), mask.len()],
                    });
                }
                let count = mask.iter().filter(|&&m| m).count();
                if count == 0 {
                    return Err(Error::InvalidTensor(
                        "cross_entropy mask selects no rows".into(),
                    ));
                }
                let mut probs = vec![T::zero(); rows * v];
                let mut total = 0.0f64;
                for r in 0..rows {
                    if !mask[r] {
                        continue;
                    }
                    if targets[r] >= v {
                        return Err(Error::InvalidTensor(format!(
                            "cross_entropy target {} out of range for {v} classes",
                            targets[r]
                        )));
                    }
                    let row = x.row(r);
                    let max = row.iter().fold(f64::NEG_INFINITY, |m, &z| m.max(z.f64()));
                    let sum: f64 = row.iter().map(|&z| (z.f64() - max).exp()).sum();
                    let lse = max + sum.ln();
                    total += lse - row[targets[r]].f64();
                    for (j, &z) in row.iter().enumerate() {
                        probs[r * v + j] = T::of((z.f64() - lse).exp());
                    }
                }
                cache = Cache::Probs(probs);
                Tensor::scalar(T::of(total / count as f64))
            }
            Op::Concat(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let (xs, ys) = (x.shape(), y.shape());
                if xs.len() != ys.len() || xs[..xs.len() - 1] != ys[..ys.len() - 1] {
                    return Err(mismatch(x, y));
                }
                let mut data = Vec::with_capacity(x.numel() + y.numel());
                for r in 0..x.rows() {
                    data.extend_from_slice(x.row(r));
                    data.extend_from_slice(y.row(r));
                }
                let mut shape = xs.to_vec();
                *shape.last_mut().unwrap() += y.last_dim();
                Tensor::from_parts(shape, data)
            }
            Op::MoeSelect { pre, exp, probs } => {
                let (p, e) = same(*pre, *exp)?;
                let g = self.val(*probs);
                if g.last_dim() != 2 || g.rows() != p.rows() {
                    return Err(mismatch(p, g));
                }
                let mut chosen = Vec::with_capacity(p.rows());
                let mut data = Vec::with_capacity(p.numel());
                for r in 0..p.rows() {
                    let gr = g.row(r);
                    // ties resolve to the pre-trained branch
                    let pick = u8::from(gr[1] > gr[0]);
                    chosen.push(pick);
                    data.extend_from_slice(if pick == 1 { e.row(r) } else { p.row(r) });
                }
                cache = Cache::Chosen(chosen);
                Tensor::from_parts(p.shape().to_vec(), data)
            }
            Op::RowMse(a, b) => {
                let (x, y) = same(*a, *b)?;
                let d = x.last_dim();
                let data = (0..x.rows())
                    .map(|r| {
                        let s: f64 = x
                            .row(r)
                            .iter()
                            .zip(y.row(r))
                            .map(|(&p, &q)| {
                                let diff = p.f64() - q.f64();
                                diff * diff
                            })
                            .sum();
                        T::of(s / d as f64)
                    })
                    .collect();
                Tensor::from_parts(row_shape(x.shape()), data)
            }
            Op::RowCosineDistance(a, b) => {
                let (x, y) = same(*a, *b)?;
                let data = (0..x.rows())
                    .map(|r| {
                        let c = cosine_parts(x.row(r), y.row(r));
                        T::of(1.0 - c.cos)
                    })
                    .collect();
                Tensor::from_parts(row_shape(x.shape()), data)
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                let s: f64 = x.data().iter().map(|v| v.f64()).sum();
                Tensor::scalar(T::of(s / x.numel() as f64))
            }
            Op::Reshape(a, shape) => self.val(*a).clone().reshape(shape.clone())?,
        };
        if !out.is_finite() {
            return Err(Error::NonFinite { node: index, op: name });
        }
        Ok((out, cache))
    }

    /// Reverse-mode pass from a scalar node.
    ///
    /// Returns a gradient for every named leaf with `requires_grad`; leaves that
    /// do not require gradients never appear in the result.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        let loss_value = self.val(loss);
        if loss_value.numel() != 1 {
            return Err(Error::NotScalar(loss_value.shape().to_vec()));
        }
        self.backward_seeded(loss, &Tensor::scalar(T::one()))
    }

    /// Vector-Jacobian product: gradients of `sum(seed * value(out))`.
    pub fn backward_seeded(&self, loss: NodeId, seed: &Tensor<T>) -> Result<Gradients<T>> {
        if self.stale {
            return Err(Error::StaleGraph);
        }
        if seed.shape() != self.val(loss).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward_seeded",
                left: self.val(loss).shape().to_vec(),
                right: seed.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(seed.data().to_vec());
        }
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                if let Some(name) = &node.name {
                    let g = grads[i]
                        .take()
                        .unwrap_or_else(|| vec![T::zero(); node.value.numel()]);
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFiniteGradient { node: i, op: "leaf" });
                    }
                    out.insert(
                        name.clone(),
                        Tensor::from_parts(node.value.shape().to_vec(), g),
                    );
                }
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteGradient {
                    node: i,
                    op: node.op.name(),
                });
            }
            self.backward_op(i, &g, &mut grads);
        }
        Ok(out)
    }

    fn backward_op(&self, index: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[index];
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        // Accumulate into the gradient buffer of `id`, allocating zeros on first touch.
        fn slot<'g, T: Real>(grads: &'g mut [Option<Vec<T>>], id: NodeId, n: usize) -> &'g mut [T] {
            grads[id.0].get_or_insert_with(|| vec![T::zero(); n])
        }
        let numel = |id: NodeId| self.val(id).numel();

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for (id, sign) in [(*a, T::one()), (*b, T::one())] {
                    if wants(id) {
                        let s = slot(grads, id, g.len());
                        for (d, &gv) in s.iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Sub(a, b) => {
                for (id, sign) in [(*a, T::one()), (*b, -T::one())] {
                    if wants(id) {
                        let s = slot(grads, id, g.len());
                        for (d, &gv) in s.iter_mut().zip(g) {
                            *d += sign * gv;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.val(*a).data(), self.val(*b).data());
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        s[j] += g[j] * y[j];
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, g.len());
                    for j in 0..g.len() {
                        s[j] += g[j] * x[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let c = T::of(*c);
                    let s = slot(grads, *a, g.len());
                    for (d, &gv) in s.iter_mut().zip(g) {
                        *d += c * gv;
                    }
                }
            }
            Op::AddSuffix(a, b) => {
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for (d, &gv) in s.iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if wants(*b) {
                    let n = numel(*b);
                    let s = slot(grads, *b, n);
                    for (j, &gv) in g.iter().enumerate() {
                        s[j % n] += gv;
                    }
                }
            }
            Op::MulSuffix(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let n = y.numel();
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for (j, dv) in s.iter_mut().enumerate() {
                        *dv += g[j] * y.data()[j % n];
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, n);
                    for (j, &gv) in g.iter().enumerate() {
                        s[j % n] += gv * x.data()[j];
                    }
                }
            }
            Op::HardGate(a) => {
                if wants(*a) {
                    let s = slot(grads, *a, 2 * g.len());
                    for (r, &gv) in g.iter().enumerate() {
                        s[r * 2 + 1] += gv;
                    }
                }
            }
            Op::Lerp { pre, exp, alpha } => {
                let (p, e, a) = (self.val(*pre), self.val(*exp), self.val(*alpha));
                let d = p.last_dim();
                let per_row = a.numel() != 1;
                let al = |r: usize| if per_row { a.data()[r] } else { a.data()[0] };
                if wants(*pre) {
                    let s = slot(grads, *pre, g.len());
                    for (j, dv) in s.iter_mut().enumerate() {
                        *dv += (T::one() - al(j / d)) * g[j];
                    }
                }
                if wants(*exp) {
                    let s = slot(grads, *exp, g.len());
                    for (j, dv) in s.iter_mut().enumerate() {
                        *dv += al(j / d) * g[j];
                    }
                }
                if wants(*alpha) {
                    let s = slot(grads, *alpha, a.numel());
                    for j in 0..g.len() {
                        let r = if per_row { j / d } else { 0 };
                        s[r] += g[j] * (e.data()[j] - p.data()[j]);
                    }
                }
            }
            Op::MatMul(a, w) => {
                let (x, wt) = (self.val(*a), self.val(*w));
                let (m, k, n) = (x.rows(), wt.shape()[0], wt.shape()[1]);
                if wants(*a) {
                    // dX = dY * W^T
                    let s = slot(grads, *a, m * k);
                    T::gemm(m, n, k, g, n as isize, 1, wt.data(), 1, n as isize, T::one(), s);
                }
                if wants(*w) {
                    // dW = X^T * dY
                    let s = slot(grads, *w, k * n);
                    T::gemm(k, m, n, x.data(), 1, k as isize, g, n as isize, 1, T::one(), s);
                }
            }
            Op::Embedding { table, ids, .. } => {
                if wants(*table) {
                    let t = self.val(*table);
                    let d = t.shape()[1];
                    let s = slot(grads, *table, t.numel());
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            s[id * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::RmsNorm { x, gain, .. } => {
                let (xv, gv) = (self.val(*x), self.val(*gain));
                let Cache::InvRms(inv) = &node.cache else {
                    unreachable!("rmsnorm cache")
                };
                let d = xv.last_dim();
                let df = T::of(d as f64);
                if wants(*x) {
                    let s = slot(grads, *x, xv.numel());
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let ri = inv[r];
                        let mut dot = T::zero();
                        for j in 0..d {
                            dot += gr[j] * gv.data()[j] * row[j];
                        }
                        let coef = ri * ri * ri * dot / df;
                        for j in 0..d {
                            s[r * d + j] += ri * gv.data()[j] * gr[j] - row[j] * coef;
                        }
                    }
                }
                if wants(*gain) {
                    let s = slot(grads, *gain, d);
                    for r in 0..xv.rows() {
                        let row = xv.row(r);
                        for j in 0..d {
                            s[j] += g[r * d + j] * row[j] * inv[r];
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let x = self.val(*a).data();
                    let Cache::Gate(gate) = &node.cache else {
                        unreachable!("gelu caches its gate")
                    };
                    let s = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        s[j] += g[j] * gelu_grad(x[j], gate[j]);
                    }
                }
            }
            Op::Sigmoid(a) => {
                if wants(*a) {
                    let y = node.value.data();
                    let s = slot(grads, *a, g.len());
                    for j in 0..g.len() {
                        s[j] += g[j] * y[j] * (T::one() - y[j]);
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let y = &node.value;
                    let d = y.last_dim();
                    let s = slot(grads, *a, g.len());
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &g[r * d..(r + 1) * d];
                        let dot = yr.iter().zip(gr).fold(T::zero(), |acc, (&p, &q)| acc + p * q);
                        for j in 0..d {
                            s[r * d + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::CausalAttention { q, k, v, heads } => {
                let Cache::Probs(probs) = &node.cache else {
                    unreachable!("attention cache")
                };
                let (qv, kv, vv) = (self.val(*q), self.val(*k), self.val(*v));
                let n = qv.numel();
                let mut dq = vec![T::zero(); n];
                let mut dk = vec![T::zero(); n];
                let mut dv = vec![T::zero(); n];
                attention_backward(qv, kv, vv, *heads, probs, g, &mut dq, &mut dk, &mut dv);
                for (id, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if wants(id) {
                        let s = slot(grads, id, n);
                        for (d, b) in s.iter_mut().zip(buf) {
                            *d += b;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
            } => {
                if wants(*logits) {
                    let Cache::Probs(probs) = &node.cache else {
                        unreachable!("cross-entropy cache")
                    };
                    let x = self.val(*logits);
                    let v = x.last_dim();
                    let count = T::of(mask.iter().filter(|&&m| m).count() as f64);
                    let scale = g[0] / count;
                    let s = slot(grads, *logits, x.numel());
                    for r in 0..x.rows() {
                        if !mask[r] {
                            continue;
                        }
                        for j in 0..v {
                            let onehot = if j == targets[r] { T::one() } else { T::zero() };
                            s[r * v + j] += scale * (probs[r * v + j] - onehot);
                        }
                    }
                }
            }
            Op::Concat(a, b) => {
                let (da, db) = (self.val(*a).last_dim(), self.val(*b).last_dim());
                let rows = self.val(*a).rows();
                let w = da + db;
                if wants(*a) {
                    let s = slot(grads, *a, rows * da);
                    for r in 0..rows {
                        for j in 0..da {
                            s[r * da + j] += g[r * w + j];
                        }
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, rows * db);
                    for r in 0..rows {
                        for j in 0..db {
                            s[r * db + j] += g[r * w + da + j];
                        }
                    }
                }
            }
            Op::MoeSelect { pre, exp, probs } => {
                // Straight-through: backward as if the output were p0 * pre + p1 * exp.
                let (p, e, pr) = (self.val(*pre), self.val(*exp), self.val(*probs));
                let d = p.last_dim();
                if wants(*pre) {
                    let s = slot(grads, *pre, g.len());
                    for j in 0..g.len() {
                        s[j] += pr.data()[(j / d) * 2] * g[j];
                    }
                }
                if wants(*exp) {
                    let s = slot(grads, *exp, g.len());
                    for j in 0..g.len() {
                        s[j] += pr.data()[(j / d) * 2 + 1] * g[j];
                    }
                }
                if wants(*probs) {
                    let s = slot(grads, *probs, pr.numel());
                    for r in 0..p.rows() {
                        let gr = &g[r * d..(r + 1) * d];
                        let dot = |row: &[T]| gr.iter().zip(row).fold(T::zero(), |acc, (&a, &b)| acc + a * b);
                        s[r * 2] += dot(p.row(r));
                        s[r * 2 + 1] += dot(e.row(r));
                    }
                }
            }
            Op::RowMse(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let d = x.last_dim();
                let two_over_d = T::of(2.0 / d as f64);
                let diff: Vec<T> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .enumerate()
                    .map(|(j, (&p, &q))| two_over_d * (p - q) * g[j / d])
                    .collect();
                if wants(*a) {
                    let s = slot(grads, *a, diff.len());
                    for (dv, &v) in s.iter_mut().zip(&diff) {
                        *dv += v;
                    }
                }
                if wants(*b) {
                    let s = slot(grads, *b, diff.len());
                    for (dv, &v) in s.iter_mut().zip(&diff) {
                        *dv -= v;
                    }
                }
            }
            Op::RowCosineDistance(a, b) => {
                let (x, y) = (self.val(*a), self.val(*b));
                let d = x.last_dim();
                let mut da = vec![T::zero(); x.numel()];
                let mut db = vec![T::zero(); x.numel()];
                for r in 0..x.rows() {
                    let (xr, yr) = (x.row(r), y.row(r));
                    let c = cosine_parts(xr, yr);
                    let gr = -g[r].f64();
                    for j in 0..d {
                        let (xa, yb) = (xr[j].f64(), yr[j].f64());
                        let (ga, gb) = if c.guarded {
                            (yb / COSINE_EPS, xa / COSINE_EPS)
                        } else {
                            (
                                yb / c.denom - c.cos * xa / c.na2,
                                xa / c.denom - c.cos * yb / c.nb2,
                            )
                        };
                        da[r * d + j] = T::of(gr * ga);
                        db[r * d + j] = T::of(gr * gb);
                    }
                }
                for (id, buf) in [(*a, da), (*b, db)] {
                    if wants(id) {
                        let s = slot(grads, id, buf.len());
                        for (dv, v) in s.iter_mut().zip(buf) {
                            *dv += v;
                        }
                    }
                }
            }
            Op::Mean(a) => {
                if wants(*a) {
                    let n = numel(*a);
                    let gv = g[0] / T::of(n as f64);
                    let s = slot(grads, *a, n);
                    for dv in s.iter_mut() {
                        *dv += gv;
                    }
                }
            }
            Op::Reshape(a, _) => {
                if wants(*a) {
                    let s = slot(grads, *a, g.len());
                    for (dv, &gv) in s.iter_mut().zip(g) {
                        *dv += gv;
                    }
                }
            }
        }
    }
}

fn row_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Tanh-approximated GELU.
/// `0.5 (1 + tanh u)` written as the logistic `1 / (1 + exp(-2u))`.
fn gelu_gate<T: Real>(x: T) -> T {
    let u = T::of(GELU_C) * (x + T::of(GELU_K) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

fn gelu_grad<T: Real>(x: T, gate: T) -> T {
    let du = T::of(GELU_C) * (T::one() + T::of(3.0 * GELU_K) * x * x);
    gate + x * (gate + gate) * (T::one() - gate) * du
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softmax_row<T: Real>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let start = out.len();
    let mut sum = 0.0f64;
    for &v in row {
        let e = (v - max).exp();
        sum += e.f64();
        out.push(e);
    }
    let inv = T::of(1.0 / sum);
    for v in &mut out[start..] {
        *v *= inv;
    }
}

const COSINE_EPS: f64 = 1e-8;

struct CosineParts {
    cos: f64,
    denom: f64,
    na2: f64,
    nb2: f64,
    guarded: bool,
}

fn cosine_parts<T: Real>(a: &[T], b: &[T]) -> CosineParts {
    let (mut dot, mut na2, mut nb2) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x.f64(), y.f64());
        dot += x * y;
        na2 += x * x;
        nb2 += y * y;
    }
    let raw = (na2 * nb2).sqrt();
    let guarded = raw <= COSINE_EPS;
    let denom = if guarded { COSINE_EPS } else { raw };
    CosineParts {
        cos: dot / denom,
        denom,
        na2,
        nb2,
        guarded,
    }
}

fn attention_forward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
) -> (Tensor<T>, Vec<T>) {
    let (b, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut out = vec![T::zero(); q.numel()];
    let mut probs = vec![T::zero(); b * heads * t * t];
    let mut row = vec![T::zero(); t];
    for bi in 0..b {
        for h in 0..heads {
            let off = h * dh;
            for ti in 0..t {
                let qrow = &qd[(bi * t + ti) * d + off..][..dh];
                let mut max = T::neg_infinity();
                for si in 0..=ti {
                    let krow = &kd[(bi * t + si) * d + off..][..dh];
                    let s = dot(qrow, krow) * scale;
                    row[si] = s;
                    max = max.max(s);
                }
                let mut sum = T::zero();
                for r in row.iter_mut().take(ti + 1) {
                    *r = (*r - max).exp();
                    sum += *r;
                }
                let p_off = ((bi * heads + h) * t + ti) * t;
                let orow = &mut out[(bi * t + ti) * d + off..][..dh];
                for si in 0..=ti {
                    let p = row[si] / sum;
                    probs[p_off + si] = p;
                    let vrow = &vd[(bi * t + si) * d + off..][..dh];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += p * vv;
                    }
                }
            }
        }
    }
    (Tensor::from_parts(q.shape().to_vec(), out), probs)
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Real>(
    q: &Tensor<T>,
    k: &Tensor<T>,
    v: &Tensor<T>,
    heads: usize,
    probs: &[T],
    g: &[T],
    dq: &mut [T],
    dk: &mut [T],
    dv: &mut [T],
) {
    let (b, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let mut dp = vec![T::zero(); t];
    for bi in 0..b {
        for h in 0..heads {
            let off = h * dh;
            for ti in 0..t {
                let p_off = ((bi * heads + h) * t + ti) * t;
                let grow = &g[(bi * t + ti) * d + off..][..dh];
                let mut weighted = T::zero();
                for si in 0..=ti {
                    let vrow = &vd[(bi * t + si) * d + off..][..dh];
                    dp[si] = dot(grow, vrow);
                    let p = probs[p_off + si];
                    weighted += p * dp[si];
                    let dvrow = &mut dv[(bi * t + si) * d + off..][..dh];
                    for (o, &gv) in dvrow.iter_mut().zip(grow) {
                        *o += p * gv;
                    }
                }
                let qrow = &qd[(bi * t + ti) * d + off..][..dh];
                for si in 0..=ti {
                    let ds = probs[p_off + si] * (dp[si] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let krow = &kd[(bi * t + si) * d + off..][..dh];
                    let dqrow = &mut dq[(bi * t + ti) * d + off..][..dh];
                    for (o, &kv) in dqrow.iter_mut().zip(krow) {
                        *o += ds * kv;
                    }
                    let dkrow = &mut dk[(bi * t + si) * d + off..][..dh];
                    for (o, &qv) in dkrow.iter_mut().zip(qrow) {
                        *o += ds * qv;
                    }
                }
            }
        }
    }
}

#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor<f32> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_classes() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[1, 4], &[0.3; 4]));
        let l = g.cross_entropy(x, &[2], &[true]).unwrap();
        assert!((g.value(l).item() - 4f32.ln()).abs() < 1e-6);
        assert!((g.value(l).item() - 1.386_294).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_hand_value() {
        let mut g = Graph::<f32>::new();
        let x = g.constant(t(&[2], &[3.0, 4.0]));
        let gain = g.constant(t(&[2], &[1.0, 1.0]));
        let y = g.rmsnorm(x, gain, 0.0).unwrap();
        let out = g.value(y).data();
        assert!((out[0] - 0.848_528).abs() < 1e-6);
        assert!((out[1] - 1.131_371).abs() < 1e-6);
    }

    #[test]
    fn linear_gradient() {
        let mut g = Graph::<f32>::new();
        let x = g.param("x", Cow::Owned(t(&[1], &[2.0])), true);
        let y = g.scale(x, 3.0).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("x").unwrap().data(), &[3.0]);
    }

    #[test]
    fn softmax_cross_entropy_residual() {
        let mut g = Graph::<f32>::new();
        let x = g.param("logits", Cow::Owned(t(&[1, 2], &[1.0, 0.0])), true);
        let l = g.cross_entropy(x, &[0], &[true]).unwrap();
        let grads = g.backward(l).unwrap();
        let d = grads.get("logits").unwrap().data();
        assert!((d[0] + 0.268_941).abs() < 1e-6);
        assert!((d[1] - 0.268_941).abs() < 1e-6);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f32>::new();
        let a = g.param("a", Cow::Owned(t(&[2], &[1.0, 2.0])), true);
        let b = g.param("b", Cow::Owned(t(&[2], &[3.0, 4.0])), false);
        let y = g.mul(a, b).unwrap();
        let l = g.mean(y).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads.contains("a"));
        assert!(!grads.contains("b"));
        assert_eq!(grads.get("a").unwrap().data(), &[1.5, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_stale() {
        let mut g = Graph::<f32>::new();
        let a = g.param("a", Cow::Owned(t(&[2], &[1.0, 2.0])), true);
        let y = g.scale(a, 2.0).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
        let l = g.mean(y).unwrap();
        g.rebind("a", t(&[2], &[0.0, 0.0])).unwrap();
        assert!(matches!(g.backward(l), Err(Error::StaleGraph)));
        g.evaluate(&BTreeMap::new()).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
        assert!(g.backward(l).is_ok());
    }

    #[test]
    fn shape_mismatch_names_operation() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[2], &[1.0, 2.0]));
        let b = g.constant(t(&[3], &[1.0, 2.0, 3.0]));
        match g.add(a, b) {
            Err(Error::ShapeMismatch { op, left, right }) => {
                assert_eq!(op, "add");
                assert_eq!(left, vec![2]);
                assert_eq!(right, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_output_is_reported_with_node() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(t(&[1], &[3.0e38]));
        let err = g.scale(a, 10.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { node: 1, op: "scale" }));
    }

    #[test]
    fn attention_is_causal() {
        let mut g = Graph::<f32>::new();
        let mk = |seed: f32| Tensor::from_fn(&[1, 3, 4], |i| ((i as f32 + seed) * 0.37).sin());
        let q = g.constant(mk(0.0));
        let k = g.constant(mk(1.0));
        let v = g.constant(mk(2.0));
        let out = g.causal_attention(q, k, v, 2).unwrap();
        let first = g.value(out).clone();
        let mut k2 = mk(1.0);
        k2.data_mut()[8..].iter_mut().for_each(|x| *x += 1.0);
        let mut g2 = Graph::<f32>::new();
        let q = g2.constant(mk(0.0));
        let k = g2.constant(k2);
        let v = g2.constant(mk(2.0));
        let out2 = g2.causal_attention(q, k, v, 2).unwrap();
        assert_eq!(first.data()[..8], g2.value(out2).data()[..8]);
        assert_ne!(first.data()[8..], g2.value(out2).data()[8..]);
    }

    #[test]
    fn moe_select_ties_pick_pre() {
        let mut g = Graph::<f32>::new();
        let p = g.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let e = g.constant(t(&[2, 2], &[5.0, 6.0, 7.0, 8.0]));
        let pr = g.constant(t(&[2, 2], &[0.5, 0.5, 0.2, 0.8]));
        let c = g.moe_select(p, e, pr).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 7.0, 8.0]);
        assert_eq!(g.moe_choices(c).unwrap(), &[0, 1]);
    }

    #[test]
    fn cosine_of_identical_rows_is_exactly_zero() {
        let mut g = Graph::<f32>::new();
        let a = g.constant(Tensor::from_fn(&[3, 5], |i| (i as f32 * 0.71).cos()));
        let c = g.row_cosine_distance(a, a).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }
}
