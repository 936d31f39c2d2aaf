//! Memory reset, the dual attention stream layer, the gated memory update and
//! the Memformer-style reader/writer used by the baseline variants.

use serde::{Deserialize, Serialize};

use crate::data::ResetFlags;
use crate::nn::{encoder_layer, AttnProj, Ffn, Linear, Norm, StreamParams};
use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Result, Scalar, Tensor, TensorError, Var};

/// Persistent memory `[batch × k × d]` carried between timesteps.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<F> {
    pub slots: Tensor<F>,
    pub timestep: u64,
}

impl<F: Scalar> MemoryState<F> {
    pub fn zeros(batch: usize, k: usize, d: usize) -> Self {
        Self {
            slots: Tensor::zeros(&[batch, k, d]),
            timestep: 0,
        }
    }

    pub fn batch(&self) -> usize {
        self.slots.shape()[0]
    }

    pub fn slots_per_lane(&self) -> usize {
        self.slots.shape()[1]
    }

    /// The state that follows this one, holding `slots`.
    pub fn advance(&self, slots: Tensor<F>) -> Self {
        Self {
            slots,
            timestep: self.timestep + 1,
        }
    }
}

/// Which memory keys a memory slot may attend to when it is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryAttention {
    /// Slot `i` sees only its own memory key plus all input keys.
    #[default]
    SlotDiagonal,
    /// Every slot sees every memory key.
    FullKeys,
}

impl MemoryAttention {
    pub fn name(self) -> &'static str {
        match self {
            MemoryAttention::SlotDiagonal => "slot_diagonal",
            MemoryAttention::FullKeys => "full_keys",
        }
    }
}

/// `v_b` and the dedicated reset normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryGlobals {
    pub v_b: ParamId,
    pub reset_norm: Norm,
}

/// Candidate MLP and per-slot gate of the residual gated update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GateParams {
    pub candidate: Ffn,
    pub gate: Linear,
}

/// Input-stream and memory-stream parameters of one dual attention layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualLayer {
    pub input: StreamParams,
    pub memory: StreamParams,
}

/// Memory cross-attention inserted between self-attention and feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemformerRead {
    pub ln: Norm,
    pub attn: AttnProj,
    /// ReZero scale on the read branch; `None` adds the branch directly.
    pub alpha: Option<ParamId>,
}

/// Projections of the Memformer memory writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemformerWriter {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
}

/// `LayerNorm((1 − r) ⊙ M + v_b)` per lane.
pub fn reset_and_normalize<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    globals: &MemoryGlobals,
    memory: Var,
    reset: &ResetFlags,
) -> Result<Var> {
    let keep: Vec<F> = reset.0.iter().map(|&r| if r { F::zero() } else { F::one() }).collect();
    let m = g.scale_lanes(memory, &keep)?;
    let v_b = g.param(store, globals.v_b);
    let m = g.add_bcast(m, v_b)?;
    globals.reset_norm.forward(g, store, m)
}

/// Mask for the joint attention of `[memory; input]` queries over
/// `[memory; input]` keys. Input rows see every memory key and the valid
/// input keys; memory rows see the valid input keys plus either their own
/// slot key or all slot keys.
pub fn dual_stream_mask(batch: usize, k: usize, n: usize, h_valid: &[bool], mode: MemoryAttention) -> AttnMask {
    assert_eq!(h_valid.len(), batch * n);
    let t = k + n;
    let mut allowed = vec![false; batch * t * t];
    for b in 0..batch {
        for i in 0..t {
            let row = &mut allowed[(b * t + i) * t..(b * t + i + 1) * t];
            for (j, slot) in row.iter_mut().enumerate().take(k) {
                *slot = i >= k || mode == MemoryAttention::FullKeys || i == j;
            }
            row[k..].copy_from_slice(&h_valid[b * n..(b + 1) * n]);
        }
    }
    AttnMask {
        batch,
        nq: t,
        nk: t,
        allowed,
    }
}

/// One encoder layer with a dual attention stream.
///
/// Input tokens `h[B×n×d]` and memory slots `m[B×k×d]` are projected with
/// their own weights, attend jointly over `[K_M; K_H]` and `[V_M; V_H]`, and
/// each stream then applies its own output projection, residual and
/// feed-forward block. With `k == 0` this is exactly [`encoder_layer`].
#[allow(clippy::too_many_arguments)]
pub fn dual_stream_layer<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    layer: &DualLayer,
    h: Var,
    m: Var,
    heads: usize,
    h_valid: &[bool],
    mode: MemoryAttention,
) -> Result<(Var, Var)> {
    let (batch, n) = (g.shape(h)[0], g.shape(h)[1]);
    let k = g.shape(m)[1];
    if k == 0 {
        let mask = AttnMask::key_padding(h_valid, batch, n, n);
        let h = encoder_layer(g, store, &layer.input, h, heads, Some(&mask))?;
        return Ok((h, m));
    }
    let (pi, pm) = (&layer.input, &layer.memory);
    let hn = pi.ln_attn.forward(g, store, h)?;
    let mn = pm.ln_attn.forward(g, store, m)?;
    let mut qkv = [None; 3];
    for (slot, (lh, lm)) in qkv.iter_mut().zip([
        (pi.attn.q, pm.attn.q),
        (pi.attn.k, pm.attn.k),
        (pi.attn.v, pm.attn.v),
    ]) {
        let xm = lm.forward(g, store, mn)?;
        let xh = lh.forward(g, store, hn)?;
        *slot = Some(g.concat1(&[xm, xh])?);
    }
    let [q, kk, v] = qkv.map(Option::unwrap);
    let mask = dual_stream_mask(batch, k, n, h_valid, mode);
    let a = g.attention(q, kk, v, heads, Some(&mask))?;
    let am = g.slice1(a, 0, k)?;
    let ah = g.slice1(a, k, n)?;

    let oh = pi.attn.o.forward(g, store, ah)?;
    let oh = g.dropout(oh)?;
    let h = g.add(h, oh)?;
    let h = pi.ffn_block(g, store, h)?;

    let om = pm.attn.o.forward(g, store, am)?;
    let om = g.dropout(om)?;
    let m = g.add(m, om)?;
    let m = pm.ffn_block(g, store, m)?;
    Ok((h, m))
}

/// `z ⊙ MLP(h_m) + (1 − z) ⊙ m_prev` with one gate `z = σ(W_z h_m + b_z)`
/// per slot. Returns the new memory and the gates `[B×k×1]`.
pub fn gated_memory_update<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    params: &GateParams,
    h_m: Var,
    m_prev: Var,
) -> Result<(Var, Var)> {
    let cand = params.candidate.forward(g, store, h_m)?;
    let logit = params.gate.forward(g, store, h_m)?;
    let z = g.sigmoid(logit)?;
    let next = g.lerp(m_prev, cand, z)?;
    Ok((next, z))
}

/// `alpha · branch`.
pub fn rezero_gate<F: Scalar>(g: &mut Graph<F>, branch: Var, alpha: Var) -> Result<Var> {
    g.scale_by(branch, alpha)
}

/// Memory cross-attention read with its residual connection:
/// `h + [α ·] O(Attn(Q(LN(h)), K(m), V(m)))`. Memory keys are never masked.
pub fn memformer_read<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    read: &MemformerRead,
    h: Var,
    m: Var,
    heads: usize,
) -> Result<Var> {
    let hn = read.ln.forward(g, store, h)?;
    let branch = read.attn.forward(g, store, hn, m, heads, None)?;
    let branch = match read.alpha {
        Some(alpha) => {
            let alpha = g.param(store, alpha);
            rezero_gate(g, branch, alpha)?
        }
        None => branch,
    };
    let branch = g.dropout(branch)?;
    g.add(h, branch)
}

/// Memformer writer: slot `i` queries `[k_{m_i}; K_H]` and mixes
/// `[m_i; V_H]`, so slots never see each other.
pub fn memformer_write<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    writer: &MemformerWriter,
    m: Var,
    h_l: Var,
    heads: usize,
    h_valid: &[bool],
) -> Result<Var> {
    let (batch, k) = (g.shape(m)[0], g.shape(m)[1]);
    let n = g.shape(h_l)[1];
    if h_valid.len() != batch * n {
        return Err(TensorError::Usage(format!(
            "padding mask has {} entries for {batch}×{n} tokens",
            h_valid.len()
        )));
    }
    let q = writer.q.forward(g, store, m)?;
    let km = writer.k.forward(g, store, m)?;
    let kh = writer.k.forward(g, store, h_l)?;
    let vh = writer.v.forward(g, store, h_l)?;
    let keys = g.concat1(&[km, kh])?;
    let values = g.concat1(&[m, vh])?;
    let t = k + n;
    let mut allowed = vec![false; batch * k * t];
    for b in 0..batch {
        for i in 0..k {
            let row = &mut allowed[(b * k + i) * t..(b * k + i + 1) * t];
            row[i] = true;
            row[k..].copy_from_slice(&h_valid[b * n..(b + 1) * n]);
        }
    }
    let mask = AttnMask {
        batch,
        nq: k,
        nk: t,
        allowed,
    };
    g.attention(q, keys, values, heads, Some(&mask))
}
