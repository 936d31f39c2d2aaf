//! Plain row-by-row re-implementation of the model equations, used as an
//! oracle. Nothing here calls into the tensor library's operations.
#![allow(dead_code)]

use membart_core::tensor::ParamStore;

pub type Rows = Vec<Vec<f64>>;

pub struct Oracle<'a> {
    pub store: &'a ParamStore<f64>,
    pub heads: usize,
}

impl Oracle<'_> {
    pub fn p(&self, name: &str) -> Vec<f64> {
        let id = self.store.find(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        self.store.get(id).data().to_vec()
    }

    pub fn linear(&self, x: &Rows, name: &str) -> Rows {
        let w = self.p(&format!("{name}.w"));
        let b = self.p(&format!("{name}.b"));
        let dout = b.len();
        x.iter()
            .map(|row| {
                (0..dout)
                    .map(|j| b[j] + row.iter().enumerate().map(|(i, &v)| v * w[i * dout + j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    pub fn norm(&self, x: &Rows, name: &str) -> Rows {
        let g = self.p(&format!("{name}.gain"));
        let b = self.p(&format!("{name}.bias"));
        x.iter().map(|row| layer_norm(row, &g, &b)).collect()
    }

    pub fn ffn(&self, x: &Rows, name: &str) -> Rows {
        let h = self.linear(x, &format!("{name}.up"));
        let h: Rows = h.iter().map(|r| r.iter().map(|&v| gelu(v)).collect()).collect();
        self.linear(&h, &format!("{name}.down"))
    }

    pub fn embed(&self, ids: &[usize], table: &str, positions: &str) -> Rows {
        let tok = self.p(table);
        let pos = self.p(positions);
        let d = tok.len() / self.store.get(self.store.find(table).unwrap()).shape()[0];
        ids.iter()
            .enumerate()
            .map(|(i, &t)| (0..d).map(|c| tok[t * d + c] * (d as f64).sqrt() + pos[i * d + c]).collect())
            .collect()
    }

    /// Pre-norm encoder layer over one lane.
    pub fn encoder_layer(&self, h: &Rows, name: &str, valid: &[bool]) -> Rows {
        let hn = self.norm(h, &format!("{name}.ln_attn"));
        let q = self.linear(&hn, &format!("{name}.attn.q"));
        let k = self.linear(&hn, &format!("{name}.attn.k"));
        let v = self.linear(&hn, &format!("{name}.attn.v"));
        let a = attention(&q, &k, &v, self.heads, |_, j| valid[j]);
        let h = add(h, &self.linear(&a, &format!("{name}.attn.o")));
        let f = self.ffn(&self.norm(&h, &format!("{name}.ln_ffn")), &format!("{name}.ffn"));
        add(&h, &f)
    }

    /// Memory entering layer 1: `LN((1 − r)·M + v_b)`.
    pub fn reset_memory(&self, m: &Rows, reset: bool) -> Rows {
        let vb = self.p("mem.v_b");
        let d = m.first().map_or(0, Vec::len);
        let x: Rows = m
            .iter()
            .enumerate()
            .map(|(i, row)| row.iter().enumerate().map(|(c, &v)| if reset { 0.0 } else { v } + vb[i * d + c]).collect())
            .collect();
        self.norm(&x, "mem.reset_norm")
    }

    /// Dual-stream layer over one lane; `full_keys` lets every slot see
    /// every slot key.
    pub fn dual_layer(&self, h: &Rows, m: &Rows, ei: &str, mi: &str, valid: &[bool], full_keys: bool) -> (Rows, Rows) {
        let k = m.len();
        let hn = self.norm(h, &format!("{ei}.ln_attn"));
        let mn = self.norm(m, &format!("{mi}.ln_attn"));
        let cat = |x: &str| -> Rows {
            let mut r = self.linear(&mn, &format!("{mi}.attn.{x}"));
            r.extend(self.linear(&hn, &format!("{ei}.attn.{x}")));
            r
        };
        let (q, kk, v) = (cat("q"), cat("k"), cat("v"));
        let a = attention(&q, &kk, &v, self.heads, |i, j| {
            if j < k {
                i >= k || full_keys || i == j
            } else {
                valid[j - k]
            }
        });
        let (am, ah) = a.split_at(k);
        let mut h = add(h, &self.linear(&ah.to_vec(), &format!("{ei}.attn.o")));
        h = add(&h, &self.ffn(&self.norm(&h, &format!("{ei}.ln_ffn")), &format!("{ei}.ffn")));
        let mut m = add(m, &self.linear(&am.to_vec(), &format!("{mi}.attn.o")));
        m = add(&m, &self.ffn(&self.norm(&m, &format!("{mi}.ln_ffn")), &format!("{mi}.ffn")));
        (h, m)
    }

    /// Plain encoder for one lane.
    pub fn stateless_encode(&self, layers: usize, ids: &[usize], valid: &[bool]) -> Rows {
        let mut h = self.embed(ids, "embed.token", "embed.enc_pos");
        for l in 0..layers {
            h = self.encoder_layer(&h, &format!("enc.{l}"), valid);
        }
        self.norm(&h, "enc.final")
    }

    /// MemBART encoder for one lane; returns (states, next memory, gates).
    /// With `shared` the memory stream reuses the input stream's weights.
    pub fn membart_encode(
        &self,
        layers: usize,
        ids: &[usize],
        valid: &[bool],
        m: &Rows,
        reset: bool,
        shared: bool,
    ) -> (Rows, Rows, Vec<f64>) {
        let mut h = self.embed(ids, "embed.token", "embed.enc_pos");
        let m_in = self.reset_memory(m, reset);
        let mut mm = m_in.clone();
        for l in 0..layers {
            let ei = format!("enc.{l}");
            let mi = if shared { ei.clone() } else { format!("mem.{l}") };
            (h, mm) = self.dual_layer(&h, &mm, &ei, &mi, valid, false);
        }
        let states = self.norm(&h, "enc.final");
        let hm = self.norm(&mm, "mem.final");
        let cand = self.ffn(&hm, "mem.candidate");
        let z: Vec<f64> = self.linear(&hm, "mem.gate").iter().map(|r| sigmoid(r[0])).collect();
        let next = m_in
            .iter()
            .zip(&cand)
            .zip(&z)
            .map(|((p, c), &z)| p.iter().zip(c).map(|(&p, &c)| p + z * (c - p)).collect())
            .collect();
        (states, next, z)
    }

    /// Memformer encoder for one lane; returns (states, next memory).
    pub fn memformer_encode(&self, layers: usize, ids: &[usize], valid: &[bool], m: &Rows, reset: bool) -> (Rows, Rows) {
        let mut h = self.embed(ids, "embed.token", "embed.enc_pos");
        let m_in = self.reset_memory(m, reset);
        let k = m_in.len();
        for l in 0..layers {
            let ei = format!("enc.{l}");
            let hn = self.norm(&h, &format!("{ei}.ln_attn"));
            let q = self.linear(&hn, &format!("{ei}.attn.q"));
            let kk = self.linear(&hn, &format!("{ei}.attn.k"));
            let v = self.linear(&hn, &format!("{ei}.attn.v"));
            let a = attention(&q, &kk, &v, self.heads, |_, j| valid[j]);
            h = add(&h, &self.linear(&a, &format!("{ei}.attn.o")));
            let hn = self.norm(&h, &format!("mem.{l}.ln_read"));
            let q = self.linear(&hn, &format!("mem.{l}.read.q"));
            let kk = self.linear(&m_in, &format!("mem.{l}.read.k"));
            let v = self.linear(&m_in, &format!("mem.{l}.read.v"));
            let a = attention(&q, &kk, &v, self.heads, |_, _| true);
            let mut branch = self.linear(&a, &format!("mem.{l}.read.o"));
            if let Some(id) = self.store.find(&format!("mem.{l}.alpha")) {
                let alpha = self.store.get(id).data()[0];
                branch.iter_mut().for_each(|r| r.iter_mut().for_each(|v| *v *= alpha));
            }
            h = add(&h, &branch);
            h = add(&h, &self.ffn(&self.norm(&h, &format!("{ei}.ln_ffn")), &format!("{ei}.ffn")));
        }
        let states = self.norm(&h, "enc.final");
        let q = self.linear(&m_in, "mem.writer.q");
        let mut keys = self.linear(&m_in, "mem.writer.k");
        keys.extend(self.linear(&states, "mem.writer.k"));
        let mut values = m_in.clone();
        values.extend(self.linear(&states, "mem.writer.v"));
        let next = attention(&q, &keys, &values, self.heads, |i, j| if j < k { i == j } else { valid[j - k] });
        (states, next)
    }

    /// Causal decoder for one lane; returns logits `[m × V]`.
    pub fn decode(&self, layers: usize, tgt: &[usize], enc: &Rows, src_valid: &[bool]) -> Rows {
        let mut y = self.embed(tgt, "embed.token", "embed.dec_pos");
        for l in 0..layers {
            let n = format!("dec.{l}");
            let yn = self.norm(&y, &format!("{n}.ln_attn"));
            let q = self.linear(&yn, &format!("{n}.attn.q"));
            let k = self.linear(&yn, &format!("{n}.attn.k"));
            let v = self.linear(&yn, &format!("{n}.attn.v"));
            let a = attention(&q, &k, &v, self.heads, |i, j| j <= i);
            y = add(&y, &self.linear(&a, &format!("{n}.attn.o")));
            let yn = self.norm(&y, &format!("{n}.ln_cross"));
            let q = self.linear(&yn, &format!("{n}.cross.q"));
            let k = self.linear(enc, &format!("{n}.cross.k"));
            let v = self.linear(enc, &format!("{n}.cross.v"));
            let a = attention(&q, &k, &v, self.heads, |_, j| src_valid[j]);
            y = add(&y, &self.linear(&a, &format!("{n}.cross.o")));
            y = add(&y, &self.ffn(&self.norm(&y, &format!("{n}.ln_ffn")), &format!("{n}.ffn")));
        }
        let y = self.norm(&y, "dec.final");
        let tok = self.p("embed.token");
        let d = y.first().map_or(0, Vec::len);
        let vocab = tok.len() / d.max(1);
        y.iter()
            .map(|r| (0..vocab).map(|t| r.iter().enumerate().map(|(c, &v)| v * tok[t * d + c]).sum::<f64>() / (d as f64).sqrt()).collect())
            .collect()
    }
}

pub fn layer_norm(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let n = x.len() as f64;
    let mu = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().zip(g).zip(b).map(|((&v, &g), &b)| (v - mu) * r * g + b).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
}

/// Multi-head scaled dot-product attention; rows with no allowed key are zero.
pub fn attention(q: &Rows, k: &Rows, v: &Rows, heads: usize, allowed: impl Fn(usize, usize) -> bool) -> Rows {
    let d = q.first().map_or(0, Vec::len);
    let dv = v.first().map_or(d, Vec::len);
    let (dh, dvh) = (d / heads, dv / heads);
    q.iter()
        .enumerate()
        .map(|(i, qi)| {
            let mut out = vec![0.0; dv];
            for h in 0..heads {
                let scores: Vec<Option<f64>> = k
                    .iter()
                    .enumerate()
                    .map(|(j, kj)| {
                        allowed(i, j).then(|| {
                            (0..dh).map(|c| qi[h * dh + c] * kj[h * dh + c]).sum::<f64>() / (dh as f64).sqrt()
                        })
                    })
                    .collect();
                let max = scores.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let e: Vec<f64> = scores.iter().map(|s| s.map_or(0.0, |s| (s - max).exp())).collect();
                let total: f64 = e.iter().sum();
                for (j, w) in e.iter().enumerate() {
                    for c in 0..dvh {
                        out[h * dvh + c] += w / total * v[j][h * dvh + c];
                    }
                }
            }
            out
        })
        .collect()
}

/// Splits a flat `[B × n × d]` buffer into per-lane row lists.
pub fn lanes(data: &[f64], batch: usize, n: usize, d: usize) -> Vec<Rows> {
    (0..batch)
        .map(|b| (0..n).map(|i| data[(b * n + i) * d..(b * n + i + 1) * d].to_vec()).collect())
        .collect()
}

pub fn max_abs_diff(a: &Rows, b: &Rows) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| {
            assert_eq!(x.len(), y.len());
            x.iter().zip(y).map(|(p, q)| (p - q).abs())
        })
        .fold(0.0, f64::max)
}
