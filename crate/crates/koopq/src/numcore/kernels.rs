//! Dense row-major f64 matrix kernels.
//!
//! Each output element is accumulated in a fixed left-to-right order, so the
//! rayon paths (which only move whole output rows between threads) produce
//! bit-identical results to the sequential fallbacks. Reductions that would
//! need a reordered sum stay sequential for the same reason.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (multiply-adds) below which the parallel kernels fall back
/// to the sequential loop; tiny products are dominated by thread handoff.
#[cfg(feature = "parallel")]
const PAR_MIN_FLOPS: usize = 32 * 1024;

/// `out = a * b`, with `a` n-by-k, `b` k-by-m, `out` n-by-m.
pub fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), k * m);
    debug_assert_eq!(out.len(), n * m);
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_MIN_FLOPS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            matmul_row(&a[i * k..(i + 1) * k], b, k, m, row);
        });
        return;
    }
    matmul_seq(a, b, n, k, m, out);
}

/// Sequential `a * b`; reference path for the bench comparison.
pub fn matmul_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        matmul_row(&a[i * k..(i + 1) * k], b, k, m, &mut out[i * m..(i + 1) * m]);
    }
}

/// Rayon `a * b` over output rows; bit-identical to [`matmul_seq`].
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n * m);
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        matmul_row(&a[i * k..(i + 1) * k], b, k, m, row);
    });
}

/// One output row of `a * b`: row . b, accumulated in ascending-t order.
fn matmul_row(a_row: &[f64], b: &[f64], k: usize, m: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for (t, &a_it) in a_row.iter().enumerate().take(k) {
        let b_row = &b[t * m..(t + 1) * m];
        for (o, &b_tj) in out_row.iter_mut().zip(b_row) {
            *o += a_it * b_tj;
        }
    }
}

/// `out = a * b^T`, with `a` n-by-k, `b` m-by-k, `out` n-by-m.
///
/// This is the natural layout for a dense layer whose weight is stored
/// out-by-in: both operands are walked row-major.
pub fn matmul_tb(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), m * k);
    debug_assert_eq!(out.len(), n * m);
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_MIN_FLOPS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            matmul_tb_row(&a[i * k..(i + 1) * k], b, k, m, row);
        });
        return;
    }
    matmul_tb_seq(a, b, n, k, m, out);
}

/// Sequential `a * b^T`; reference path for the bench comparison.
pub fn matmul_tb_seq(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    for i in 0..n {
        matmul_tb_row(&a[i * k..(i + 1) * k], b, k, m, &mut out[i * m..(i + 1) * m]);
    }
}

/// Rayon `a * b^T` over output rows; bit-identical to [`matmul_tb_seq`].
#[cfg(feature = "parallel")]
pub fn matmul_tb_par(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), n * m);
    out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
        matmul_tb_row(&a[i * k..(i + 1) * k], b, k, m, row);
    });
}

fn matmul_tb_row(a_row: &[f64], b: &[f64], k: usize, m: usize, out_row: &mut [f64]) {
    for (j, o) in out_row.iter_mut().enumerate().take(m) {
        let b_row = &b[j * k..(j + 1) * k];
        let mut acc = 0.0;
        for (&x, &y) in a_row.iter().zip(b_row) {
            acc += x * y;
        }
        *o = acc;
    }
}

/// `out = a^T * b`, with `a` n-by-k, `b` n-by-m, `out` k-by-m.
///
/// Used by the backward rules of both matmul variants.
pub fn matmul_ta(a: &[f64], b: &[f64], n: usize, k: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * k);
    debug_assert_eq!(b.len(), n * m);
    debug_assert_eq!(out.len(), k * m);
    #[cfg(feature = "parallel")]
    if n * k * m >= PAR_MIN_FLOPS {
        out.par_chunks_mut(m).enumerate().for_each(|(i, row)| {
            matmul_ta_row(a, b, i, n, k, m, row);
        });
        return;
    }
    for i in 0..k {
        matmul_ta_row(a, b, i, n, k, m, &mut out[i * m..(i + 1) * m]);
    }
}

/// Row `i` of `a^T * b`: out[i][j] = sum_r a[r][i] * b[r][j], r ascending.
fn matmul_ta_row(a: &[f64], b: &[f64], i: usize, n: usize, k: usize, m: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for r in 0..n {
        let a_ri = a[r * k + i];
        let b_row = &b[r * m..(r + 1) * m];
        for (o, &b_rj) in out_row.iter_mut().zip(b_row) {
            *o += a_ri * b_rj;
        }
    }
}

/// Column sums of an n-by-m matrix, accumulated in ascending-row order.
pub fn col_sums(a: &[f64], n: usize, m: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), n * m);
    debug_assert_eq!(out.len(), m);
    out.fill(0.0);
    for r in 0..n {
        let row = &a[r * m..(r + 1) * m];
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}
