//! Parameter groups and the standard Transformer sub-layers built on [`Graph`].

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{AttnMask, Graph, ParamId, ParamStore, Result, Scalar, Tensor, Var};

/// Layer normalization epsilon used everywhere.
pub const LN_EPS: f64 = 1e-5;

/// Draws parameter tensors from one deterministic stream.
pub struct Initializer<'a, F> {
    pub store: &'a mut ParamStore<F>,
    pub rng: &'a mut ChaCha8Rng,
}

impl<F: Scalar> Initializer<'_, F> {
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> ParamId {
        let rng = &mut *self.rng;
        let t = Tensor::from_fn(shape, |_| F::from_f64(rng.gen_range(-bound..=bound)));
        self.store.add(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> ParamId {
        self.store.add(name, Tensor::full(shape, F::from_f64(value)))
    }

    pub fn linear(&mut self, name: &str, din: usize, dout: usize) -> Linear {
        let bound = 1.0 / (din.max(1) as f64).sqrt();
        Linear {
            w: self.uniform(&format!("{name}.w"), &[din, dout], bound),
            b: self.constant(&format!("{name}.b"), &[dout], 0.0),
        }
    }

    pub fn norm(&mut self, name: &str, d: usize) -> Norm {
        Norm {
            gain: self.constant(&format!("{name}.gain"), &[d], 1.0),
            bias: self.constant(&format!("{name}.bias"), &[d], 0.0),
        }
    }

    pub fn ffn(&mut self, name: &str, d: usize, hidden: usize) -> Ffn {
        Ffn {
            up: self.linear(&format!("{name}.up"), d, hidden),
            down: self.linear(&format!("{name}.down"), hidden, d),
        }
    }

    pub fn attn(&mut self, name: &str, d: usize) -> AttnProj {
        AttnProj {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.linear(&format!("{name}.k"), d, d),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    pub fn stream(&mut self, name: &str, d: usize, hidden: usize) -> StreamParams {
        StreamParams {
            ln_attn: self.norm(&format!("{name}.ln_attn"), d),
            attn: self.attn(&format!("{name}.attn"), d),
            ln_ffn: self.norm(&format!("{name}.ln_ffn"), d),
            ffn: self.ffn(&format!("{name}.ffn"), d, hidden),
        }
    }
}

/// `x · W + b` with `W[in × out]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w)?;
        g.add_bcast(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Two-layer feed-forward block with a GELU in between.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ffn {
    pub up: Linear,
    pub down: Linear,
}

impl Ffn {
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.up.forward(g, store, x)?;
        let h = g.gelu(h)?;
        self.down.forward(g, store, h)
    }
}

/// Query, key, value and output projections of one attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnProj {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl AttnProj {
    /// Projects queries from `xq` and keys/values from `xkv`, attends, and
    /// applies the output projection.
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        xq: Var,
        xkv: Var,
        heads: usize,
        mask: Option<&AttnMask>,
    ) -> Result<Var> {
        let q = self.q.forward(g, store, xq)?;
        let k = self.k.forward(g, store, xkv)?;
        let v = self.v.forward(g, store, xkv)?;
        let a = g.attention(q, k, v, heads, mask)?;
        self.o.forward(g, store, a)
    }
}

/// Pre-norm attention + feed-forward parameters for one token stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StreamParams {
    pub ln_attn: Norm,
    pub attn: AttnProj,
    pub ln_ffn: Norm,
    pub ffn: Ffn,
}

impl StreamParams {
    /// `x + dropout(FFN(LN(x)))`.
    pub fn ffn_block<F: Scalar>(&self, g: &mut Graph<F>, store: &ParamStore<F>, x: Var) -> Result<Var> {
        let h = self.ln_ffn.forward(g, store, x)?;
        let h = self.ffn.forward(g, store, h)?;
        let h = g.dropout(h)?;
        g.add(x, h)
    }
}

/// Standard pre-norm Transformer encoder layer.
pub fn encoder_layer<F: Scalar>(
    g: &mut Graph<F>,
    store: &ParamStore<F>,
    p: &StreamParams,
    x: Var,
    heads: usize,
    mask: Option<&AttnMask>,
) -> Result<Var> {
    let h = p.ln_attn.forward(g, store, x)?;
    let a = p.attn.forward(g, store, h, h, heads, mask)?;
    let a = g.dropout(a)?;
    let x = g.add(x, a)?;
    p.ffn_block(g, store, x)
}

/// Decoder layer: causal self-attention, cross-attention to the encoder, feed-forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecoderLayer {
    pub self_attn: StreamParams,
    pub ln_cross: Norm,
    pub cross: AttnProj,
}

impl DecoderLayer {
    pub fn init<F: Scalar>(init: &mut Initializer<'_, F>, name: &str, d: usize, hidden: usize) -> Self {
        let ln_attn = init.norm(&format!("{name}.ln_attn"), d);
        let attn = init.attn(&format!("{name}.attn"), d);
        let ln_cross = init.norm(&format!("{name}.ln_cross"), d);
        let cross = init.attn(&format!("{name}.cross"), d);
        let ln_ffn = init.norm(&format!("{name}.ln_ffn"), d);
        let ffn = init.ffn(&format!("{name}.ffn"), d, hidden);
        Self {
            self_attn: StreamParams {
                ln_attn,
                attn,
                ln_ffn,
                ffn,
            },
            ln_cross,
            cross,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<F: Scalar>(
        &self,
        g: &mut Graph<F>,
        store: &ParamStore<F>,
        y: Var,
        enc: Var,
        heads: usize,
        self_mask: &AttnMask,
        cross_mask: &AttnMask,
    ) -> Result<Var> {
        let p = &self.self_attn;
        let h = p.ln_attn.forward(g, store, y)?;
        let a = p.attn.forward(g, store, h, h, heads, Some(self_mask))?;
        let a = g.dropout(a)?;
        let y = g.add(y, a)?;
        let h = self.ln_cross.forward(g, store, y)?;
        let c = self.cross.forward(g, store, h, enc, heads, Some(cross_mask))?;
        let c = g.dropout(c)?;
        let y = g.add(y, c)?;
        p.ffn_block(g, store, y)
    }
}
