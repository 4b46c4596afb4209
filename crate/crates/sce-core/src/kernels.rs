//! Raw dense kernels shared by the tape ops.
//!
//! Parallel variants partition work by output row (or fixed column chunks),
//! so every output element is produced by exactly one thread with a fixed
//! summation order: results are bit-identical for any thread count.

use rayon::prelude::*;

/// Below this many multiply-adds the parallel dispatch overhead dominates.
const PAR_FLOPS: usize = 1 << 20;

/// out += A (m x k) * B (k x n)
pub fn matmul_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [f64], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[t * n..(t + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, o)| row(o, i));
    } else {
        for (i, o) in out.chunks_mut(n).enumerate() {
            row(o, i);
        }
    }
}

/// out += A (m x k) * B^T where B is (n x k): out[i][j] = dot(A[i], B[j])
pub fn matmul_transb_acc(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [f64], i: usize| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            *o += dot(a_row, &b[j * k..(j + 1) * k]);
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(i, o)| row(o, i));
    } else {
        for (i, o) in out.chunks_mut(n).enumerate() {
            row(o, i);
        }
    }
}

/// out += A^T * G where A is (m x k), G is (m x n); out is (k x n).
/// Parallel over the k output rows; each walks all m rows of A and G.
pub fn matmul_transa_acc(a: &[f64], g: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(g.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    let row = |out_row: &mut [f64], t: usize| {
        for i in 0..m {
            let av = a[i * k + t];
            if av != 0.0 {
                let g_row = &g[i * n..(i + 1) * n];
                for (o, &gv) in out_row.iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    };
    if m * k * n >= PAR_FLOPS {
        out.par_chunks_mut(n).enumerate().for_each(|(t, o)| row(o, t));
    } else {
        for (t, o) in out.chunks_mut(n).enumerate() {
            row(o, t);
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

/// dst += c * src
pub fn axpy(dst: &mut [f64], src: &[f64], c: f64) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += c * s;
    }
}

/// Stable row logsumexp over a row-major (m x n) matrix. Returns per-row
/// values; a row whose entries are all -inf yields -inf (caller decides
/// whether that is an error).
pub fn row_logsumexp(a: &[f64], m: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(out.len(), m);
    let one = |i: usize| -> f64 {
        let row = &a[i * n..(i + 1) * n];
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if mx == f64::NEG_INFINITY {
            return f64::NEG_INFINITY;
        }
        let s: f64 = row.iter().map(|&v| (v - mx).exp()).sum();
        mx + s.ln()
    };
    if m * n >= PAR_FLOPS {
        out.par_iter_mut().enumerate().for_each(|(i, o)| *o = one(i));
    } else {
        for (i, o) in out.iter_mut().enumerate() {
            *o = one(i);
        }
    }
}

/// In-place stable row softmax of a (m x n) matrix. -inf entries map to 0.
pub fn row_softmax_inplace(a: &mut [f64], m: usize, n: usize) {
    debug_assert_eq!(a.len(), m * n);
    let one = |row: &mut [f64]| {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            sum += *v;
        }
        let inv = 1.0 / sum;
        for v in row.iter_mut() {
            *v *= inv;
        }
    };
    if m * n >= PAR_FLOPS {
        a.par_chunks_mut(n).for_each(one);
    } else {
        a.chunks_mut(n).for_each(one);
    }
}
