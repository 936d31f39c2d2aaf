use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Gradients, ParamId, ParamStore, Result, Scalar, Tensor, TensorError};

static NEXT_GRAPH_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    graph: u64,
    pub(super) index: usize,
}

/// Per-graph instrumentation counters.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpCounters {
    /// Query-key score entries computed by attention, summed over lanes and heads.
    pub attention_scores: u64,
    pub attention_calls: u64,
}

/// Boolean attention mask of shape `[batch, nq, nk]`; `batch == 1` broadcasts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnMask {
    pub batch: usize,
    pub nq: usize,
    pub nk: usize,
    pub allowed: Vec<bool>,
}

impl AttnMask {
    pub fn all(batch: usize, nq: usize, nk: usize) -> Self {
        Self {
            batch,
            nq,
            nk,
            allowed: vec![true; batch * nq * nk],
        }
    }

    /// Query `i` may see keys `0..=i`.
    pub fn causal(n: usize) -> Self {
        let mut allowed = vec![false; n * n];
        for i in 0..n {
            for j in 0..=i {
                allowed[i * n + j] = true;
            }
        }
        Self {
            batch: 1,
            nq: n,
            nk: n,
            allowed,
        }
    }

    /// Every query of lane `b` sees exactly the keys with `valid[b * nk + j]`.
    pub fn key_padding(valid: &[bool], batch: usize, nq: usize, nk: usize) -> Self {
        assert_eq!(valid.len(), batch * nk);
        let mut allowed = Vec::with_capacity(batch * nq * nk);
        for b in 0..batch {
            for _ in 0..nq {
                allowed.extend_from_slice(&valid[b * nk..(b + 1) * nk]);
            }
        }
        Self {
            batch,
            nq,
            nk,
            allowed,
        }
    }

    #[inline]
    pub fn allows(&self, b: usize, i: usize, j: usize) -> bool {
        let b = if self.batch == 1 { 0 } else { b };
        self.allowed[(b * self.nq + i) * self.nk + j]
    }

    /// Elementwise AND with a mask of the same query/key extent.
    pub fn and(&self, other: &AttnMask) -> AttnMask {
        assert_eq!((self.nq, self.nk), (other.nq, other.nk));
        let batch = self.batch.max(other.batch);
        let mut allowed = Vec::with_capacity(batch * self.nq * self.nk);
        for b in 0..batch {
            for i in 0..self.nq {
                for j in 0..self.nk {
                    allowed.push(self.allows(b, i, j) && other.allows(b, i, j));
                }
            }
        }
        AttnMask {
            batch,
            nq: self.nq,
            nk: self.nk,
            allowed,
        }
    }
}

#[derive(Debug)]
pub(super) enum Op<F> {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    AddBcast { a: usize, b: usize },
    MulLastBcast { x: usize, z: usize },
    Lerp { prev: usize, cand: usize, z: usize },
    Scale { x: usize, factor: F },
    ScaleVar { x: usize, alpha: usize },
    ScaleLanes { x: usize, factors: Vec<F> },
    Gelu { x: usize },
    Sigmoid { x: usize },
    Softmax { x: usize },
    LayerNorm { x: usize, gain: usize, bias: usize, mean: Vec<F>, rstd: Vec<F> },
    Embedding { table: usize, ids: Vec<usize> },
    Concat { parts: Vec<usize> },
    Slice { x: usize, start: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<F> },
    CrossEntropy { logits: usize, targets: Vec<usize>, weights: Vec<F>, norm: F, probs: Vec<F> },
    Sum { x: usize },
    Reshape { x: usize },
    Dropout { x: usize, mask: Vec<F> },
}

impl<F> Op<F> {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul { a, b, .. } | Add { a, b } | Sub { a, b } | Mul { a, b } | AddBcast { a, b } => {
                vec![*a, *b]
            }
            MulLastBcast { x, z } => vec![*x, *z],
            Lerp { prev, cand, z } => vec![*prev, *cand, *z],
            ScaleVar { x, alpha } => vec![*x, *alpha],
            Scale { x, .. }
            | ScaleLanes { x, .. }
            | Gelu { x }
            | Sigmoid { x }
            | Softmax { x }
            | Slice { x, .. }
            | Sum { x }
            | Reshape { x }
            | Dropout { x, .. } => vec![*x],
            LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Embedding { table, .. } => vec![*table],
            Concat { parts } => parts.clone(),
            Attention { q, k, v, .. } => vec![*q, *k, *v],
            CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

pub(super) struct Node<F> {
    pub value: Tensor<F>,
    pub op: Op<F>,
    pub requires_grad: bool,
}

#[derive(Debug, Clone, Copy)]
struct DropoutConfig {
    rate: f64,
    seed: u64,
}

/// Tape recording executed operations for reverse-mode differentiation.
///
/// A graph created with [`Graph::no_grad`] evaluates the same operations but
/// keeps no backward information; every node is a constant.
pub struct Graph<F: Scalar> {
    id: u64,
    pub(super) nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    params: BTreeMap<ParamId, Var>,
    recording: bool,
    pub(super) counters: OpCounters,
    dropout: Option<DropoutConfig>,
    pub(super) dropout_calls: u64,
    boundaries: usize,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self::with_recording(true)
    }

    pub fn no_grad() -> Self {
        Self::with_recording(false)
    }

    fn with_recording(recording: bool) -> Self {
        Self {
            id: NEXT_GRAPH_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            grads: Vec::new(),
            params: BTreeMap::new(),
            recording,
            counters: OpCounters::default(),
            dropout: None,
            dropout_calls: 0,
            boundaries: 0,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    /// Enables dropout. Masks are derived from `seed` and the number of
    /// dropout calls since this call, so replaying the same sequence of
    /// operations after the same `set_dropout` reproduces them exactly.
    pub fn set_dropout(&mut self, rate: f64, seed: u64) {
        self.dropout = (rate > 0.0).then_some(DropoutConfig { rate, seed });
        self.dropout_calls = 0;
    }

    pub(super) fn dropout_config(&self) -> Option<(f64, u64)> {
        self.dropout.map(|d| (d.rate, d.seed))
    }

    /// Number of nodes holding a stored value.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes recorded with backward information.
    pub fn recorded_len(&self) -> usize {
        self.nodes.iter().filter(|n| !matches!(n.op, Op::Leaf)).count()
    }

    pub fn counters(&self) -> OpCounters {
        self.counters
    }

    /// Number of detach boundaries inserted so far.
    pub fn boundaries(&self) -> usize {
        self.boundaries
    }

    pub(super) fn check(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(TensorError::ForeignVar);
        }
        Ok(v.index)
    }

    pub(super) fn node(&self, v: Var) -> Result<&Node<F>> {
        Ok(&self.nodes[self.check(v)?])
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        assert_eq!(v.graph, self.id, "variable does not belong to this graph");
        &self.nodes[v.index].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.index].requires_grad
    }

    pub(super) fn push(&mut self, value: Tensor<F>, op: Op<F>, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad =
            self.recording && op.inputs().iter().any(|&i| self.nodes[i].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn push_leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.recording,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(value, false)
    }

    /// Leaf that accumulates gradient when the graph is recording.
    pub fn leaf(&mut self, value: Tensor<F>) -> Result<Var> {
        self.push_leaf(value, true)
    }

    /// Memoized leaf for a stored parameter; repeated requests (including
    /// aliased parameter ids) return the same variable.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        // Not checked for finiteness here: a diverged parameter surfaces as
        // a non-finite error from the first op that consumes it.
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad: self.recording,
        });
        let v = Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        };
        self.params.insert(id, v);
        v
    }

    /// Copies `x` into a fresh leaf; gradient does not flow back through it.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let idx = self.check(x)?;
        self.boundaries += 1;
        let value = self.nodes[idx].value.clone();
        self.push_leaf(value, false)
    }

    /// Back-propagates from `loss` (seeded with 1) plus any `seeds`, adding
    /// the result to the accumulated gradients. Calling it again accumulates.
    pub fn backward(&mut self, loss: Option<Var>, seeds: &[(Var, &Tensor<F>)]) -> Result<()> {
        if !self.recording {
            return Err(TensorError::Usage("backward on a graph that is not recording".into()));
        }
        let n = self.nodes.len();
        let mut pending: Vec<Option<Vec<F>>> = Vec::new();
        pending.resize_with(n, || None);
        let mut top = None;
        if let Some(loss) = loss {
            let idx = self.check(loss)?;
            if self.nodes[idx].value.len() != 1 {
                return Err(TensorError::Usage(format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[idx].value.shape()
                )));
            }
            if self.nodes[idx].requires_grad {
                pending[idx] = Some(vec![F::one()]);
                top = Some(idx);
            }
        }
        for (v, g) in seeds {
            let idx = self.check(*v)?;
            let node = &self.nodes[idx];
            if !node.requires_grad {
                return Err(TensorError::Usage("seeded tensor is not recorded on the tape".into()));
            }
            if node.value.shape() != g.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "backward seed",
                    lhs: node.value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            add_into(&mut pending[idx], g.data());
            top = Some(top.map_or(idx, |t: usize| t.max(idx)));
        }
        let Some(top) = top else { return Ok(()) };
        if self.grads.len() < n {
            self.grads.resize_with(n, || None);
        }
        for i in (0..=top).rev() {
            let Some(g) = pending[i].take() else { continue };
            super::ops::backward_op(&self.nodes, i, &g, &mut pending);
            add_into(&mut self.grads[i], &g);
        }
        Ok(())
    }

    /// Accumulated gradient of `v`, if any reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<F>> {
        let idx = self.check(v).ok()?;
        let g = self.grads.get(idx)?.as_ref()?;
        Some(Tensor::new(self.nodes[idx].value.shape().to_vec(), g.clone()).expect("shape"))
    }

    /// Gradient of `v`, zeros when nothing reached it.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor<F> {
        self.grad(v)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[v.index].value.shape()))
    }

    pub fn zero_grad(&mut self) {
        self.grads.clear();
    }

    /// Adds the accumulated gradient of every parameter leaf into `out`.
    pub fn accumulate_param_grads(&self, out: &mut Gradients<F>) {
        for (&id, v) in &self.params {
            if let Some(Some(g)) = self.grads.get(v.index) {
                out.accumulate(id, g);
            }
        }
    }
}

pub(super) fn add_into<F: Scalar>(slot: &mut Option<Vec<F>>, g: &[F]) {
    match slot {
        Some(acc) => {
            for (a, &b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}
