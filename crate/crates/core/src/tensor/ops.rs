use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::graph::{add_into, AttnMask, Node, Op};
use super::kernels::{self, axpy, dot};
use super::{Graph, Result, Scalar, Tensor, TensorError, Var};

fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn last_dim(shape: &[usize]) -> usize {
    shape.last().copied().unwrap_or(1)
}

impl<F: Scalar> Graph<F> {
    /// `a[..×k] · b[k×n]`, leading dimensions of `a` preserved.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a[..×k] · b[n×k]ᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.is_empty() || bsh.len() != 2 {
            return Err(mismatch("matmul", ash, bsh));
        }
        let k = last_dim(ash);
        let (bk, n) = if trans_b { (bsh[1], bsh[0]) } else { (bsh[0], bsh[1]) };
        if k != bk {
            return Err(mismatch("matmul", ash, bsh));
        }
        let m = av.len() / k.max(1);
        let mut out = vec![F::zero(); m * n];
        if trans_b {
            kernels::matmul_nt_acc(av.data(), bv.data(), &mut out, m, k, n);
        } else {
            kernels::matmul_acc(av.data(), bv.data(), &mut out, m, k, n);
        }
        let mut shape = ash.to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::new(shape, out)?;
        self.push(
            value,
            Op::MatMul {
                a: a.index,
                b: b.index,
                trans_b,
            },
            "matmul",
        )
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
        op: Op<F>,
    ) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        if av.shape() != bv.shape() {
            return Err(mismatch(name, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Add { a: a.index, b: b.index };
        self.binary(a, b, "add", |x, y| x + y, op)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Sub { a: a.index, b: b.index };
        self.binary(a, b, "sub", |x, y| x - y, op)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let op = Op::Mul { a: a.index, b: b.index };
        self.binary(a, b, "mul", |x, y| x * y, op)
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias-style broadcast).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        let (ash, bsh) = (av.shape(), bv.shape());
        if bsh.len() > ash.len() || &ash[ash.len() - bsh.len()..] != bsh {
            return Err(mismatch("add_bcast", ash, bsh));
        }
        let mut data = av.data().to_vec();
        if !bv.is_empty() {
            for chunk in data.chunks_exact_mut(bv.len()) {
                for (x, &y) in chunk.iter_mut().zip(bv.data()) {
                    *x += y;
                }
            }
        }
        let value = Tensor::new(ash.to_vec(), data)?;
        self.push(value, Op::AddBcast { a: a.index, b: b.index }, "add_bcast")
    }

    fn check_last_bcast(&self, x: Var, z: Var, name: &'static str) -> Result<()> {
        let (xs, zs) = (self.node(x)?.value.shape(), self.node(z)?.value.shape());
        if xs.len() != zs.len() || xs.is_empty() || zs[zs.len() - 1] != 1 || xs[..xs.len() - 1] != zs[..zs.len() - 1]
        {
            return Err(mismatch(name, xs, zs));
        }
        Ok(())
    }

    /// `x[..×d] ⊙ z[..×1]`, broadcasting `z` over the last dimension.
    pub fn mul_last_bcast(&mut self, x: Var, z: Var) -> Result<Var> {
        self.check_last_bcast(x, z, "mul_last_bcast")?;
        let (xv, zv) = (&self.node(x)?.value, &self.node(z)?.value);
        let d = last_dim(xv.shape());
        let mut data = xv.data().to_vec();
        if d > 0 {
            for (row, &zz) in data.chunks_exact_mut(d).zip(zv.data()) {
                row.iter_mut().for_each(|v| *v *= zz);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::MulLastBcast { x: x.index, z: z.index }, "mul_last_bcast")
    }

    /// Convex blend `prev + z ⊙ (cand − prev)` with `z[..×1]` broadcast over the
    /// last dimension. Each output is kept inside the closed interval spanned by
    /// the corresponding `prev` and `cand` elements.
    pub fn lerp(&mut self, prev: Var, cand: Var, z: Var) -> Result<Var> {
        self.check_last_bcast(prev, z, "lerp")?;
        let (pv, cv, zv) = (&self.node(prev)?.value, &self.node(cand)?.value, &self.node(z)?.value);
        if pv.shape() != cv.shape() {
            return Err(mismatch("lerp", pv.shape(), cv.shape()));
        }
        let d = last_dim(pv.shape());
        let mut data = Vec::with_capacity(pv.len());
        if d > 0 {
            for ((p_row, c_row), &zz) in pv.data().chunks_exact(d).zip(cv.data().chunks_exact(d)).zip(zv.data()) {
                for (&p, &c) in p_row.iter().zip(c_row) {
                    let v = p + zz * (c - p);
                    data.push(v.max(p.min(c)).min(p.max(c)));
                }
            }
        }
        let value = Tensor::new(pv.shape().to_vec(), data)?;
        let op = Op::Lerp {
            prev: prev.index,
            cand: cand.index,
            z: z.index,
        };
        self.push(value, op, "lerp")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let factor = F::from_f64(factor);
        let xv = &self.node(x)?.value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * factor).collect())?;
        self.push(value, Op::Scale { x: x.index, factor }, "scale")
    }

    /// `alpha · x` for a one-element `alpha` variable.
    pub fn scale_by(&mut self, x: Var, alpha: Var) -> Result<Var> {
        let (xv, av) = (&self.node(x)?.value, &self.node(alpha)?.value);
        if av.len() != 1 {
            return Err(mismatch("scale_by", xv.shape(), av.shape()));
        }
        let a = av.data()[0];
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| v * a).collect())?;
        self.push(
            value,
            Op::ScaleVar {
                x: x.index,
                alpha: alpha.index,
            },
            "scale_by",
        )
    }

    /// Multiplies every element of lane `b` (axis 0) by the constant `factors[b]`.
    pub fn scale_lanes(&mut self, x: Var, factors: &[F]) -> Result<Var> {
        let xv = &self.node(x)?.value;
        if xv.shape().first() != Some(&factors.len()) {
            return Err(mismatch("scale_lanes", xv.shape(), &[factors.len()]));
        }
        let per = xv.len() / factors.len().max(1);
        let mut data = xv.data().to_vec();
        if per > 0 {
            for (lane, &f) in data.chunks_exact_mut(per).zip(factors) {
                lane.iter_mut().for_each(|v| *v = *v * f);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let op = Op::ScaleLanes {
            x: x.index,
            factors: factors.to_vec(),
        };
        self.push(value, op, "scale_lanes")
    }

    fn unary(&mut self, x: Var, name: &'static str, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let value = Tensor::new(xv.shape().to_vec(), xv.data().iter().map(|&v| f(v)).collect())?;
        self.push(value, op, name)
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "gelu", kernels::gelu, Op::Gelu { x: x.index })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, "sigmoid", kernels::sigmoid, Op::Sigmoid { x: x.index })
    }

    /// Softmax over the last dimension, stabilized by max-subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let d = last_dim(xv.shape());
        if d == 0 {
            return Err(TensorError::Usage("softmax over an empty dimension".into()));
        }
        let mut data = xv.data().to_vec();
        data.chunks_exact_mut(d).for_each(kernels::softmax_in_place);
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Softmax { x: x.index }, "softmax")
    }

    /// Per-row normalization over the last dimension followed by `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (xv, gv, bv) = (&self.node(x)?.value, &self.node(gain)?.value, &self.node(bias)?.value);
        let d = last_dim(xv.shape());
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(mismatch("layer_norm", xv.shape(), gv.shape()));
        }
        let eps = F::from_f64(eps);
        let rows = if d == 0 { 0 } else { xv.len() / d };
        let inv_d = F::one() / F::from_f64(d as f64);
        let mut mean = Vec::with_capacity(rows);
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(xv.len());
        for row in xv.data().chunks_exact(d.max(1)).take(rows) {
            let mu = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
            let r = F::one() / (var + eps).sqrt();
            for ((&v, &g), &b) in row.iter().zip(gv.data()).zip(bv.data()) {
                data.push((v - mu) * r * g + b);
            }
            mean.push(mu);
            rstd.push(r);
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let op = Op::LayerNorm {
            x: x.index,
            gain: gain.index,
            bias: bias.index,
            mean,
            rstd,
        };
        self.push(value, op, "layer_norm")
    }

    /// Gathers rows of `table[V×d]`; the result has shape `out_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], out_shape: &[usize]) -> Result<Var> {
        let tv = &self.node(table)?.value;
        if tv.rank() != 2 || out_shape.iter().product::<usize>() != ids.len() {
            return Err(mismatch("embedding", tv.shape(), out_shape));
        }
        let (vocab, d) = (tv.shape()[0], tv.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(TensorError::Usage(format!("token id {id} out of range for vocabulary {vocab}")));
            }
            data.extend_from_slice(&tv.data()[id * d..(id + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let value = Tensor::new(shape, data)?;
        let op = Op::Embedding {
            table: table.index,
            ids: ids.to_vec(),
        };
        self.push(value, op, "embedding")
    }

    /// Concatenates rank-3 tensors `[B×nᵢ×d]` along axis 1.
    pub fn concat1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.node(*parts.first().ok_or_else(|| TensorError::Usage("concat of nothing".into()))?)?;
        let s0 = first.value.shape().to_vec();
        if s0.len() != 3 {
            return Err(mismatch("concat1", &s0, &[]));
        }
        let (b, d) = (s0[0], s0[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.node(p)?.value.shape();
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(mismatch("concat1", &s0, s));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(b * total * d);
        for lane in 0..b {
            for &p in parts {
                let v = &self.nodes[p.index].value;
                let n = v.shape()[1];
                data.extend_from_slice(&v.data()[lane * n * d..(lane + 1) * n * d]);
            }
        }
        let value = Tensor::new(vec![b, total, d], data)?;
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.index).collect(),
        };
        self.push(value, op, "concat1")
    }

    /// Positions `start..start + len` along axis 1 of a rank-3 tensor.
    pub fn slice1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = &self.node(x)?.value;
        let s = xv.shape();
        if s.len() != 3 || start + len > s[1] {
            return Err(mismatch("slice1", s, &[start, len]));
        }
        let (b, n, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * len * d);
        for lane in 0..b {
            let base = (lane * n + start) * d;
            data.extend_from_slice(&xv.data()[base..base + len * d]);
        }
        let value = Tensor::new(vec![b, len, d], data)?;
        self.push(value, Op::Slice { x: x.index, start }, "slice1")
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `q[B×nq×d]`, `k[B×nk×d]`, `v[B×nk×dv]`; heads split `d` and `dv`
    /// evenly. Every query-key score is computed and counted; disallowed
    /// entries are then excluded from the softmax. A query with no allowed
    /// key yields a zero output row.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, mask: Option<&AttnMask>) -> Result<Var> {
        let (qv, kv, vv) = (&self.node(q)?.value, &self.node(k)?.value, &self.node(v)?.value);
        let (qs, ks, vs) = (qv.shape(), kv.shape(), vv.shape());
        if qs.len() != 3 || ks.len() != 3 || vs.len() != 3 || qs[0] != ks[0] || ks[0] != vs[0] || qs[2] != ks[2] || ks[1] != vs[1]
        {
            return Err(mismatch("attention", qs, ks));
        }
        let (batch, nq, d, nk, dv) = (qs[0], qs[1], qs[2], ks[1], vs[2]);
        if heads == 0 || d % heads != 0 || dv % heads != 0 {
            return Err(TensorError::Usage(format!("{heads} heads do not divide widths {d}/{dv}")));
        }
        if let Some(m) = mask {
            if m.nq != nq || m.nk != nk || (m.batch != 1 && m.batch != batch) {
                return Err(mismatch("attention mask", &[m.batch, m.nq, m.nk], &[batch, nq, nk]));
            }
        }
        let (dh, dvh) = (d / heads, dv / heads);
        let scale = F::one() / F::from_f64(dh as f64).sqrt();
        let mut out = vec![F::zero(); batch * nq * dv];
        let mut probs = vec![F::zero(); batch * heads * nq * nk];
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        for b in 0..batch {
            for h in 0..heads {
                for i in 0..nq {
                    let qrow = &qd[(b * nq + i) * d + h * dh..][..dh];
                    let prow = &mut probs[((b * heads + h) * nq + i) * nk..][..nk];
                    let mut max = F::neg_infinity();
                    for j in 0..nk {
                        let s = dot(qrow, &kd[(b * nk + j) * d + h * dh..][..dh]) * scale;
                        if mask.map_or(true, |m| m.allows(b, i, j)) {
                            prow[j] = s;
                            max = max.max(s);
                        } else {
                            prow[j] = F::neg_infinity();
                        }
                    }
                    if max == F::neg_infinity() {
                        prow.iter_mut().for_each(|p| *p = F::zero());
                        continue;
                    }
                    let mut sum = F::zero();
                    for p in prow.iter_mut() {
                        *p = if *p == F::neg_infinity() { F::zero() } else { (*p - max).exp() };
                        sum += *p;
                    }
                    let inv = F::one() / sum;
                    let orow = &mut out[(b * nq + i) * dv + h * dvh..][..dvh];
                    for (j, p) in prow.iter_mut().enumerate() {
                        *p *= inv;
                        if *p != F::zero() {
                            axpy(*p, &vd[(b * nk + j) * dv + h * dvh..][..dvh], orow);
                        }
                    }
                }
            }
        }
        self.counters.attention_scores += (batch * heads * nq * nk) as u64;
        self.counters.attention_calls += 1;
        let value = Tensor::new(vec![batch, nq, dv], out)?;
        let op = Op::Attention {
            q: q.index,
            k: k.index,
            v: v.index,
            heads,
            probs,
        };
        self.push(value, op, "attention")
    }

    /// `Σᵣ wᵣ · (−log softmax(logitsᵣ)[targetᵣ]) / norm` over rows of `logits[..×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[F], norm: F) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        let vocab = last_dim(lv.shape());
        let rows = if vocab == 0 { 0 } else { lv.len() / vocab };
        if targets.len() != rows || weights.len() != rows {
            return Err(mismatch("cross_entropy", lv.shape(), &[targets.len(), weights.len()]));
        }
        let mut probs = vec![F::zero(); lv.len()];
        let mut total = F::zero();
        for (r, (row, prow)) in lv.data().chunks_exact(vocab.max(1)).zip(probs.chunks_exact_mut(vocab.max(1))).enumerate().take(rows) {
            if weights[r] == F::zero() {
                continue;
            }
            if targets[r] >= vocab {
                return Err(TensorError::Usage(format!("target {} out of range for vocabulary {vocab}", targets[r])));
            }
            prow.copy_from_slice(row);
            kernels::softmax_in_place(prow);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
            total += weights[r] * (lse - row[targets[r]]);
        }
        let value = Tensor::scalar(total / norm);
        let op = Op::CrossEntropy {
            logits: logits.index,
            targets: targets.to_vec(),
            weights: weights.to_vec(),
            norm,
            probs,
        };
        self.push(value, op, "cross_entropy")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().copied().sum::<F>();
        self.push(Tensor::scalar(s), Op::Sum { x: x.index }, "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len().max(1);
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.node(x)?.value.clone().reshape(shape)?;
        self.push(value, Op::Reshape { x: x.index }, "reshape")
    }

    /// Inverted dropout; the identity unless enabled with [`Graph::set_dropout`].
    pub fn dropout(&mut self, x: Var) -> Result<Var> {
        let Some((rate, seed)) = self.dropout_config() else {
            return Ok(x);
        };
        self.dropout_calls += 1;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ self.dropout_calls.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let keep = F::from_f64(1.0 / (1.0 - rate));
        let xv = &self.node(x)?.value;
        let mask: Vec<F> = (0..xv.len())
            .map(|_| if rng.gen::<f64>() < rate { F::zero() } else { keep })
            .collect();
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::Dropout { x: x.index, mask }, "dropout")
    }
}

/// Propagates the output gradient `g` of node `i` into `pending` for every
/// input that requires gradient.
pub(super) fn backward_op<F: Scalar>(nodes: &[Node<F>], i: usize, g: &[F], pending: &mut [Option<Vec<F>>]) {
    let want = |j: usize| nodes[j].requires_grad;
    let val = |j: usize| &nodes[j].value;
    let mut send = |j: usize, grad: Vec<F>| {
        if nodes[j].requires_grad {
            add_into(&mut pending[j], &grad);
        }
    };
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let k = last_dim(av.shape());
            let m = av.len() / k.max(1);
            let n = last_dim(nodes[i].value.shape());
            if want(*a) {
                let mut da = vec![F::zero(); av.len()];
                if *trans_b {
                    kernels::matmul_acc(g, bv.data(), &mut da, m, n, k);
                } else {
                    kernels::matmul_nt_acc(g, bv.data(), &mut da, m, n, k);
                }
                send(*a, da);
            }
            if want(*b) {
                let mut db = vec![F::zero(); bv.len()];
                if *trans_b {
                    kernels::matmul_tn_acc(g, av.data(), &mut db, m, n, k);
                } else {
                    kernels::matmul_tn_acc(av.data(), g, &mut db, m, k, n);
                }
                send(*b, db);
            }
        }
        Op::Add { a, b } => {
            send(*a, g.to_vec());
            send(*b, g.to_vec());
        }
        Op::Sub { a, b } => {
            send(*a, g.to_vec());
            send(*b, g.iter().map(|&v| -v).collect());
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            if want(*a) {
                send(*a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
            }
            if want(*b) {
                send(*b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
        }
        Op::AddBcast { a, b } => {
            send(*a, g.to_vec());
            if want(*b) {
                let bl = val(*b).len();
                let mut db = vec![F::zero(); bl];
                if bl > 0 {
                    for chunk in g.chunks_exact(bl) {
                        for (acc, &v) in db.iter_mut().zip(chunk) {
                            *acc += v;
                        }
                    }
                }
                send(*b, db);
            }
        }
        Op::MulLastBcast { x, z } => {
            let (xv, zv) = (val(*x), val(*z));
            let d = last_dim(xv.shape());
            if want(*x) {
                let mut dx = g.to_vec();
                if d > 0 {
                    for (row, &zz) in dx.chunks_exact_mut(d).zip(zv.data()) {
                        row.iter_mut().for_each(|v| *v *= zz);
                    }
                }
                send(*x, dx);
            }
            if want(*z) {
                let dz = if d == 0 {
                    vec![F::zero(); zv.len()]
                } else {
                    g.chunks_exact(d).zip(xv.data().chunks_exact(d)).map(|(gr, xr)| dot(gr, xr)).collect()
                };
                send(*z, dz);
            }
        }
        Op::Lerp { prev, cand, z } => {
            let (pv, cv, zv) = (val(*prev), val(*cand), val(*z));
            let d = last_dim(pv.shape());
            if d == 0 {
                return;
            }
            if want(*prev) {
                let mut dp = g.to_vec();
                for (row, &zz) in dp.chunks_exact_mut(d).zip(zv.data()) {
                    row.iter_mut().for_each(|v| *v *= F::one() - zz);
                }
                send(*prev, dp);
            }
            if want(*cand) {
                let mut dc = g.to_vec();
                for (row, &zz) in dc.chunks_exact_mut(d).zip(zv.data()) {
                    row.iter_mut().for_each(|v| *v *= zz);
                }
                send(*cand, dc);
            }
            if want(*z) {
                let dz = g
                    .chunks_exact(d)
                    .zip(pv.data().chunks_exact(d).zip(cv.data().chunks_exact(d)))
                    .map(|(gr, (pr, cr))| gr.iter().zip(pr.iter().zip(cr)).map(|(&gg, (&p, &c))| gg * (c - p)).sum())
                    .collect();
                send(*z, dz);
            }
        }
        Op::Scale { x, factor } => send(*x, g.iter().map(|&v| v * *factor).collect()),
        Op::ScaleVar { x, alpha } => {
            let a = val(*alpha).data()[0];
            if want(*x) {
                send(*x, g.iter().map(|&v| v * a).collect());
            }
            if want(*alpha) {
                send(*alpha, vec![dot(g, val(*x).data())]);
            }
        }
        Op::ScaleLanes { x, factors } => {
            let per = g.len() / factors.len().max(1);
            let mut dx = g.to_vec();
            if per > 0 {
                for (lane, &f) in dx.chunks_exact_mut(per).zip(factors) {
                    lane.iter_mut().for_each(|v| *v = *v * f);
                }
            }
            send(*x, dx);
        }
        Op::Gelu { x } => send(*x, g.iter().zip(val(*x).data()).map(|(&gg, &xx)| gg * kernels::gelu_grad(xx)).collect()),
        Op::Sigmoid { x } => {
            let y = nodes[i].value.data();
            send(*x, g.iter().zip(y).map(|(&gg, &yy)| gg * yy * (F::one() - yy)).collect());
        }
        Op::Softmax { x } => {
            let y = nodes[i].value.data();
            let d = last_dim(nodes[i].value.shape());
            let mut dx = vec![F::zero(); y.len()];
            for ((yr, gr), dr) in y.chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)) {
                let s = dot(yr, gr);
                for ((o, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yy * (gg - s);
                }
            }
            send(*x, dx);
        }
        Op::LayerNorm { x, gain, bias, mean, rstd } => {
            let (xv, gv) = (val(*x), val(*gain));
            let d = last_dim(xv.shape());
            let inv_d = F::one() / F::from_f64(d as f64);
            let mut dx = vec![F::zero(); xv.len()];
            let mut dgain = vec![F::zero(); d];
            let mut dbias = vec![F::zero(); d];
            let mut xhat = vec![F::zero(); d];
            let mut dyh = vec![F::zero(); d];
            for (r, ((xr, gr), dxr)) in xv.data().chunks_exact(d).zip(g.chunks_exact(d)).zip(dx.chunks_exact_mut(d)).enumerate() {
                for c in 0..d {
                    xhat[c] = (xr[c] - mean[r]) * rstd[r];
                    dyh[c] = gr[c] * gv.data()[c];
                    dgain[c] += gr[c] * xhat[c];
                    dbias[c] += gr[c];
                }
                let m1 = dyh.iter().copied().sum::<F>() * inv_d;
                let m2 = dot(&dyh, &xhat) * inv_d;
                for c in 0..d {
                    dxr[c] = rstd[r] * (dyh[c] - m1 - xhat[c] * m2);
                }
            }
            send(*x, dx);
            send(*gain, dgain);
            send(*bias, dbias);
        }
        Op::Embedding { table, ids } => {
            if want(*table) {
                let tv = val(*table);
                let d = tv.shape()[1];
                let mut dt = vec![F::zero(); tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (o, &v) in dt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                        *o += v;
                    }
                }
                send(*table, dt);
            }
        }
        Op::Concat { parts } => {
            let s = nodes[i].value.shape();
            let (b, total, d) = (s[0], s[1], s[2]);
            let mut offset = 0;
            for &p in parts {
                let n = val(p).shape()[1];
                if want(p) {
                    let mut dp = Vec::with_capacity(b * n * d);
                    for lane in 0..b {
                        let base = (lane * total + offset) * d;
                        dp.extend_from_slice(&g[base..base + n * d]);
                    }
                    send(p, dp);
                }
                offset += n;
            }
        }
        Op::Slice { x, start } => {
            let xs = val(*x).shape();
            let (b, n, d) = (xs[0], xs[1], xs[2]);
            let len = nodes[i].value.shape()[1];
            let mut dx = vec![F::zero(); b * n * d];
            for lane in 0..b {
                let base = (lane * n + start) * d;
                dx[base..base + len * d].copy_from_slice(&g[lane * len * d..(lane + 1) * len * d]);
            }
            send(*x, dx);
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (qv, kv, vv) = (val(*q), val(*k), val(*v));
            let (batch, nq, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
            let (nk, dv) = (kv.shape()[1], vv.shape()[2]);
            let (dh, dvh) = (d / heads, dv / heads);
            let scale = F::one() / F::from_f64(dh as f64).sqrt();
            let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
            let mut dq = vec![F::zero(); qv.len()];
            let mut dk = vec![F::zero(); kv.len()];
            let mut dvv = vec![F::zero(); vv.len()];
            let mut dp = vec![F::zero(); nk];
            for b in 0..batch {
                for h in 0..*heads {
                    for i in 0..nq {
                        let prow = &probs[((b * heads + h) * nq + i) * nk..][..nk];
                        let go = &g[(b * nq + i) * dv + h * dvh..][..dvh];
                        let mut s = F::zero();
                        for j in 0..nk {
                            if prow[j] == F::zero() {
                                dp[j] = F::zero();
                                continue;
                            }
                            let vrow = (b * nk + j) * dv + h * dvh;
                            dp[j] = dot(go, &vd[vrow..vrow + dvh]);
                            s += prow[j] * dp[j];
                            axpy(prow[j], go, &mut dvv[vrow..vrow + dvh]);
                        }
                        let qoff = (b * nq + i) * d + h * dh;
                        for j in 0..nk {
                            if prow[j] == F::zero() {
                                continue;
                            }
                            let ds = prow[j] * (dp[j] - s) * scale;
                            let koff = (b * nk + j) * d + h * dh;
                            axpy(ds, &kd[koff..koff + dh], &mut dq[qoff..qoff + dh]);
                            axpy(ds, &qd[qoff..qoff + dh], &mut dk[koff..koff + dh]);
                        }
                    }
                }
            }
            send(*q, dq);
            send(*k, dk);
            send(*v, dvv);
        }
        Op::CrossEntropy { logits, targets, weights, norm, probs } => {
            let vocab = last_dim(val(*logits).shape());
            let mut dl = vec![F::zero(); probs.len()];
            for (r, (dr, pr)) in dl.chunks_exact_mut(vocab).zip(probs.chunks_exact(vocab)).enumerate() {
                if weights[r] == F::zero() {
                    continue;
                }
                let c = g[0] * weights[r] / *norm;
                for (o, &p) in dr.iter_mut().zip(pr) {
                    *o = c * p;
                }
                dr[targets[r]] -= c;
            }
            send(*logits, dl);
        }
        Op::Sum { x } => send(*x, vec![g[0]; val(*x).len()]),
        Op::Reshape { x } => send(*x, g.to_vec()),
        Op::Dropout { x, mask } => send(*x, g.iter().zip(mask).map(|(&a, &m)| a * m).collect()),
    }
}
