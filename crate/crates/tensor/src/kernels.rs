//! Raw kernels behind the tape operations. They work on contiguous
//! row-major slices and know nothing about the graph.

use crate::scalar::{max_of, pairwise_sum};
use crate::Scalar;

/// A contiguous run of rows that attend only to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

impl Segment {
    pub fn new(start: usize, len: usize) -> Self {
        Segment { start, len }
    }
}

/// Numerically stable softmax of one row, in place. Entries with
/// `allowed[j] == false` get probability zero; if nothing is allowed the
/// row becomes all zeros.
pub fn softmax_row<T: Scalar>(row: &mut [T], allowed: Option<&[bool]>) {
    let mut max = T::neg_infinity();
    match allowed {
        Some(a) => {
            for (x, &ok) in row.iter().zip(a) {
                if ok && *x > max {
                    max = *x;
                }
            }
        }
        None => max = max_of(row),
    }
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|x| *x = T::zero());
        return;
    }
    T::exp_shifted_in_place(row, max);
    if let Some(a) = allowed {
        for (x, &ok) in row.iter_mut().zip(a) {
            if !ok {
                *x = T::zero();
            }
        }
    }
    let inv = T::one() / pairwise_sum(row);
    for x in row.iter_mut() {
        *x *= inv;
    }
}

pub struct AttentionForward<T> {
    pub out: Vec<T>,
    /// One `len x len` probability matrix per (segment, head), segment-major.
    pub probs: Vec<Vec<T>>,
}

/// Multi-head scaled dot-product attention.
///
/// `qkv` is `n x 3d` with the query, key and value projections side by side;
/// the result is `n x d`. Rows outside every segment produce zeros.
pub fn attention_forward<T: Scalar>(
    qkv: &[T],
    n: usize,
    d: usize,
    heads: usize,
    segments: &[Segment],
    key_mask: Option<&[bool]>,
) -> AttentionForward<T> {
    assert_eq!(qkv.len(), n * 3 * d, "attention: qkv must be n x 3d");
    assert!(heads > 0 && d % heads == 0, "attention: d must divide into heads");
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut out = vec![T::zero(); n * d];
    let mut probs = Vec::with_capacity(segments.len() * heads);
    let rs = (3 * d) as isize;
    for seg in segments {
        assert!(seg.start + seg.len <= n, "attention: segment out of range");
        let l = seg.len;
        let mask = key_mask.map(|m| &m[seg.start..seg.start + l]);
        for h in 0..heads {
            let mut p = vec![T::zero(); l * l];
            if l == 0 {
                probs.push(p);
                continue;
            }
            let base = seg.start * 3 * d + h * dh;
            // SAFETY: every pointer walks `l` rows of stride 3d (or d for the
            // output) starting inside its buffer, which the asserts above bound.
            unsafe {
                let q = qkv.as_ptr().add(base);
                let k = q.add(d);
                let v = q.add(2 * d);
                T::gemm_raw(l, dh, l, scale, q, rs, 1, k, 1, rs, T::zero(), p.as_mut_ptr(), l as isize, 1);
                for row in p.chunks_mut(l) {
                    softmax_row(row, mask);
                }
                let o = out.as_mut_ptr().add(seg.start * d + h * dh);
                T::gemm_raw(l, l, dh, T::one(), p.as_ptr(), l as isize, 1, v, rs, 1, T::zero(), o, d as isize, 1);
            }
            probs.push(p);
        }
    }
    AttentionForward { out, probs }
}

/// Accumulates into `dqkv` the gradient of [`attention_forward`] given the
/// upstream gradient `dout` and the saved probabilities.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    qkv: &[T],
    dout: &[T],
    n: usize,
    d: usize,
    heads: usize,
    segments: &[Segment],
    probs: &[Vec<T>],
    dqkv: &mut [T],
) {
    assert_eq!(dqkv.len(), n * 3 * d);
    assert_eq!(dout.len(), n * d);
    let dh = d / heads;
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let rs = (3 * d) as isize;
    for (si, seg) in segments.iter().enumerate() {
        let l = seg.len;
        if l == 0 {
            continue;
        }
        for h in 0..heads {
            let p = &probs[si * heads + h];
            let mut ds = vec![T::zero(); l * l];
            let base = seg.start * 3 * d + h * dh;
            // SAFETY: same row/stride bounds as the forward pass; dqkv is a
            // separate buffer from qkv and dout.
            unsafe {
                let q = qkv.as_ptr().add(base);
                let k = q.add(d);
                let v = q.add(2 * d);
                let go = dout.as_ptr().add(seg.start * d + h * dh);
                let dq = dqkv.as_mut_ptr().add(base);
                let dk = dq.add(d);
                let dv = dq.add(2 * d);
                // dP = dO V^T
                T::gemm_raw(l, dh, l, T::one(), go, d as isize, 1, v, 1, rs, T::zero(), ds.as_mut_ptr(), l as isize, 1);
                // dV += P^T dO
                T::gemm_raw(l, l, dh, T::one(), p.as_ptr(), 1, l as isize, go, d as isize, 1, T::one(), dv, rs, 1);
                for (drow, prow) in ds.chunks_mut(l).zip(p.chunks(l)) {
                    let dot: T = drow.iter().zip(prow).map(|(a, b)| *a * *b).sum();
                    for (x, pp) in drow.iter_mut().zip(prow) {
                        *x = *pp * (*x - dot);
                    }
                }
                // dQ += scale dS K, dK += scale dS^T Q
                T::gemm_raw(l, l, dh, scale, ds.as_ptr(), l as isize, 1, k, rs, 1, T::one(), dq, rs, 1);
                T::gemm_raw(l, l, dh, scale, ds.as_ptr(), 1, l as isize, q, rs, 1, T::one(), dk, rs, 1);
            }
        }
    }
}

pub struct LinearXent<T> {
    /// Mean cross-entropy over the rows.
    pub loss: T,
    pub dh: Vec<T>,
    pub dw: Vec<T>,
    pub db: Vec<T>,
}

const XENT_CHUNK: usize = 128;
/// Vocabulary columns per GEMM call in the fused loss, so that each call's
/// operands stay cache resident.
const XENT_COLS: usize = 1024;

/// Mean cross-entropy of `softmax(h W + b)` against `targets`, together
/// with its gradients. Rows are processed in chunks so the full `n x v`
/// logit matrix never exists at once.
#[allow(clippy::too_many_arguments)]
pub fn linear_cross_entropy<T: Scalar>(
    h: &[T],
    n: usize,
    d: usize,
    w: &[T],
    v: usize,
    b: &[T],
    targets: &[usize],
    want_dh: bool,
    want_dw: bool,
) -> LinearXent<T> {
    assert_eq!(h.len(), n * d);
    assert_eq!(w.len(), d * v);
    assert_eq!(b.len(), v);
    assert_eq!(targets.len(), n);
    let mut dh = if want_dh { vec![T::zero(); n * d] } else { Vec::new() };
    let mut dw = if want_dw { vec![T::zero(); d * v] } else { Vec::new() };
    let mut db = if want_dw { vec![T::zero(); v] } else { Vec::new() };
    if n == 0 {
        return LinearXent { loss: T::zero(), dh, dw, db };
    }
    let inv_n = T::one() / T::from_f64(n as f64);
    let mut total = 0f64;
    let mut logits = vec![T::zero(); XENT_CHUNK.min(n) * v];
    for r0 in (0..n).step_by(XENT_CHUNK) {
        let rows = XENT_CHUNK.min(n - r0);
        let hr = &h[r0 * d..(r0 + rows) * d];
        let z = &mut logits[..rows * v];
        for c0 in (0..v).step_by(XENT_COLS) {
            let cols = XENT_COLS.min(v - c0);
            // SAFETY: columns c0..c0 + cols of w and z, row stride v.
            unsafe {
                T::gemm_raw(
                    rows, d, cols, T::one(), hr.as_ptr(), d as isize, 1, w.as_ptr().add(c0), v as isize, 1,
                    T::zero(), z.as_mut_ptr().add(c0), v as isize, 1,
                )
            }
        }
        for (i, row) in z.chunks_mut(v).enumerate() {
            let t = targets[r0 + i];
            assert!(t < v, "cross-entropy target {t} out of range {v}");
            for (x, &bias) in row.iter_mut().zip(b) {
                *x += bias;
            }
            let max = max_of(row);
            let zt = row[t] - max;
            T::exp_shifted_in_place(row, max);
            let sum = pairwise_sum(row);
            total += (sum.ln() - zt).as_f64();
            let scale = inv_n / sum;
            if want_dw {
                for (x, acc) in row.iter_mut().zip(db.iter_mut()) {
                    *x *= scale;
                    *acc += *x;
                }
            } else {
                for x in row.iter_mut() {
                    *x *= scale;
                }
            }
            row[t] -= inv_n;
            if want_dw {
                db[t] -= inv_n;
            }
        }
        for c0 in (0..v).step_by(XENT_COLS) {
            let cols = XENT_COLS.min(v - c0);
            // SAFETY: as above; h and w are read transposed through strides.
            unsafe {
                if want_dw {
                    T::gemm_raw(
                        d, rows, cols, T::one(), hr.as_ptr(), 1, d as isize, z.as_ptr().add(c0), v as isize, 1,
                        T::one(), dw.as_mut_ptr().add(c0), v as isize, 1,
                    )
                }
                if want_dh {
                    T::gemm_raw(
                        rows, cols, d, T::one(), z.as_ptr().add(c0), v as isize, 1, w.as_ptr().add(c0), 1, v as isize,
                        T::one(), dh.as_mut_ptr().add(r0 * d), d as isize, 1,
                    )
                }
            }
        }
    }
    LinearXent {
        loss: T::from_f64(total / n as f64),
        dh,
        dw,
        db,
    }
}

/// `h W + b` for a chunk of rows, handed to `visit` one row at a time.
pub fn linear_rows<T: Scalar>(
    h: &[T],
    n: usize,
    d: usize,
    w: &[T],
    v: usize,
    b: &[T],
    mut visit: impl FnMut(usize, &[T]),
) {
    assert_eq!(h.len(), n * d);
    let mut logits = vec![T::zero(); XENT_CHUNK.min(n.max(1)) * v];
    for r0 in (0..n).step_by(XENT_CHUNK) {
        let rows = XENT_CHUNK.min(n - r0);
        let z = &mut logits[..rows * v];
        for row in z.chunks_mut(v) {
            row.copy_from_slice(b);
        }
        crate::tensor::matmul_into(rows, d, v, &h[r0 * d..], w, z, true);
        for (i, row) in z.chunks(v).enumerate() {
            visit(r0 + i, row);
        }
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, x) in row.iter().enumerate() {
        if *x > row[best] {
            best = i;
        }
    }
    best
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

/// GELU, tanh approximation.
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let k = T::from_f64(GELU_K);
    let half = T::from_f64(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::from_f64(3.0) * k * x * x)
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Layer norm over the last dimension. Returns the output plus the
/// normalized input and inverse standard deviations for the backward pass.
pub fn layer_norm<T: Scalar>(x: &[T], cols: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let rows = x.len() / cols.max(1);
    let mut out = vec![T::zero(); x.len()];
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let eps = T::from_f64(LAYER_NORM_EPS);
    let c = T::from_f64(cols as f64);
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mean = pairwise_sum(row) / c;
        let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / c;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..cols {
            let xh = (row[j] - mean) * rs;
            xhat[r * cols + j] = xh;
            out[r * cols + j] = xh * gamma[j] + beta[j];
        }
    }
    (out, xhat, rstd)
}
