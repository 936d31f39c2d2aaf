//! Slice-level numeric kernels. All loops run in a fixed order so results are
//! bitwise reproducible for identical inputs.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    if n == 0 {
        return;
    }
    for (a_row, out_row) in a.chunks_exact(k.max(1)).zip(out.chunks_exact_mut(n)).take(m) {
        let mut rows = b.chunks_exact(n);
        let mut coef = a_row.chunks_exact(4);
        for c in &mut coef {
            let x = [rows.next().unwrap(), rows.next().unwrap(), rows.next().unwrap(), rows.next().unwrap()];
            axpy4([c[0], c[1], c[2], c[3]], x, out_row);
        }
        for (&av, b_row) in coef.remainder().iter().zip(rows) {
            axpy(av, b_row, out_row);
        }
    }
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn matmul_nt_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    matmul_acc(a, &bt, out, m, k, n);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_tn_acc<F: Scalar>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    if n == 0 || k == 0 {
        return;
    }
    let (a_rows, b_rows) = (&a[..m * k], &b[..m * n]);
    let mut a_blocks = a_rows.chunks_exact(4 * k);
    let mut b_blocks = b_rows.chunks_exact(4 * n);
    for (ab, bb) in (&mut a_blocks).zip(&mut b_blocks) {
        let x = [&bb[..n], &bb[n..2 * n], &bb[2 * n..3 * n], &bb[3 * n..]];
        for (kk, out_row) in out.chunks_exact_mut(n).enumerate() {
            axpy4([ab[kk], ab[k + kk], ab[2 * k + kk], ab[3 * k + kk]], x, out_row);
        }
    }
    for (a_row, b_row) in a_blocks.remainder().chunks_exact(k).zip(b_blocks.remainder().chunks_exact(n)) {
        for (&av, out_row) in a_row.iter().zip(out.chunks_exact_mut(n)) {
            axpy(av, b_row, out_row);
        }
    }
}

/// Row-major transpose of an `rows×cols` matrix.
pub fn transpose<F: Scalar>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `y += alpha · x`
#[inline]
pub fn axpy<F: Scalar>(alpha: F, x: &[F], y: &mut [F]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// `y += a[0]·x[0] + a[1]·x[1] + a[2]·x[2] + a[3]·x[3]`, added left to right
/// so the result equals four successive [`axpy`] calls bit for bit.
#[inline]
fn axpy4<F: Scalar>(a: [F; 4], x: [&[F]; 4], y: &mut [F]) {
    let n = y.len();
    let (x0, x1, x2, x3) = (&x[0][..n], &x[1][..n], &x[2][..n], &x[3][..n]);
    for j in 0..n {
        y[j] = (((y[j] + a[0] * x0[j]) + a[1] * x1[j]) + a[2] * x2[j]) + a[3] * x3[j];
    }
}

/// Dot product with eight independent accumulators so the loop vectorizes.
#[inline]
pub fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<F: Scalar>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = F::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))` and its derivative,
/// evaluated as `x·σ(2u)`, which is the same function and avoids `tanh`.
#[inline]
pub fn gelu<F: Scalar>(x: F) -> F {
    x * sigmoid(gelu_arg(x))
}

#[inline]
fn gelu_arg<F: Scalar>(x: F) -> F {
    let c2 = F::from_f64(1.595_769_121_605_730_8);
    let k = F::from_f64(0.044_715);
    c2 * (x + k * x * x * x)
}

#[inline]
pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c2 = F::from_f64(1.595_769_121_605_730_8);
    let k3 = F::from_f64(0.134_145);
    let s = sigmoid(gelu_arg(x));
    s + x * s * (F::one() - s) * c2 * (F::one() + k3 * x * x)
}

#[inline]
pub fn sigmoid<F: Scalar>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}
