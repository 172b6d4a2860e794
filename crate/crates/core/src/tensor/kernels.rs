//! Flat numeric kernels behind the tensor operations.
//!
//! Every kernel computes each output element with a fixed, size-independent
//! summation order, so the parallel and sequential paths produce bit-identical
//! results for any thread count. The `parallel` feature selects which path
//! the dispatching entry points use by default; both remain callable for
//! cross-checks and benchmarks.

use std::cell::Cell;

thread_local! {
    static FLOPS: Cell<u64> = const { Cell::new(0) };
}

/// Reset the calling thread's multiply-add counter.
pub fn reset_flops() {
    FLOPS.with(|c| c.set(0));
}

/// Multiply-adds recorded on the calling thread since the last reset.
pub fn flops() -> u64 {
    FLOPS.with(|c| c.get())
}

pub(crate) fn add_flops(n: u64) {
    FLOPS.with(|c| c.set(c.get() + n));
}

/// Work threshold below which the dispatching kernels stay sequential.
#[cfg(feature = "parallel")]
const PAR_MIN_MADDS: usize = 1 << 15;

/// `out[m x n] = a[m x k] * b[k x n]`, single-threaded.
pub fn matmul_seq(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        matmul_row(&a[i * k..(i + 1) * k], b, n, out_row);
    }
}

/// `out[m x n] = a[m x k] * b[k x n]`, rows distributed over the rayon pool.
#[cfg(feature = "parallel")]
pub fn matmul_par(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    use rayon::prelude::*;
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let rows_per_chunk = (PAR_MIN_MADDS / (k * n).max(1)).clamp(1, m.max(1));
    out.par_chunks_mut(rows_per_chunk * n)
        .enumerate()
        .for_each(|(chunk, out_rows)| {
            let row0 = chunk * rows_per_chunk;
            for (i, out_row) in out_rows.chunks_exact_mut(n).enumerate() {
                let r = row0 + i;
                matmul_row(&a[r * k..(r + 1) * k], b, n, out_row);
            }
        });
}

#[inline]
fn matmul_row(a_row: &[f64], b: &[f64], n: usize, out_row: &mut [f64]) {
    out_row.fill(0.0);
    for (kk, &a_ik) in a_row.iter().enumerate() {
        let b_row = &b[kk * n..(kk + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += a_ik * bv;
        }
    }
}

/// Dispatching matrix multiply; records `m*k*n` multiply-adds.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    add_flops((m * k * n) as u64);
    let mut out = vec![0.0; m * n];
    #[cfg(feature = "parallel")]
    {
        if m * k * n >= PAR_MIN_MADDS {
            matmul_par(a, b, m, k, n, &mut out);
            return out;
        }
    }
    matmul_seq(a, b, m, k, n, &mut out);
    out
}
