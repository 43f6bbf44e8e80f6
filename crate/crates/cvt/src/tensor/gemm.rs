//! Row-major matrix-multiply kernels used by matmul, bmm, and conv2d.
//!
//! All kernels accumulate into `out` (`+=`), so callers zero-init or chain.
//! Parallelism splits output rows across threads; each output element is
//! still reduced in the same sequential order, so results are bit-identical
//! for any CVT_THREADS value.

use std::sync::OnceLock;

/// Worker threads for intra-op parallelism, from the CVT_THREADS env var.
/// Defaults to 1 (fully deterministic single-threaded execution).
pub fn num_threads() -> usize {
    static N: OnceLock<usize> = OnceLock::new();
    *N.get_or_init(|| {
        std::env::var("CVT_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .filter(|&n| n >= 1)
            .unwrap_or(1)
    })
}

fn pool() -> Option<&'static rayon::ThreadPool> {
    static POOL: OnceLock<Option<rayon::ThreadPool>> = OnceLock::new();
    POOL.get_or_init(|| {
        let n = num_threads();
        if n <= 1 {
            None
        } else {
            rayon::ThreadPoolBuilder::new().num_threads(n).build().ok()
        }
    })
    .as_ref()
}

const PAR_WORK_THRESHOLD: usize = 1 << 20;

use crate::float::Float;

/// out[m×n] += a[m×k] · b[k×n]
pub(crate) fn gemm_nn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [T], i: usize| {
        for l in 0..k {
            let av = a[i * k + l];
            let brow = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    match pool() {
        Some(p) if m * n * k >= PAR_WORK_THRESHOLD && m > 1 => p.install(|| {
            use rayon::prelude::*;
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row(out_row, i));
        }),
        _ => {
            for (i, out_row) in out.chunks_mut(n).enumerate() {
                row(out_row, i);
            }
        }
    }
}

/// out[m×n] += a[m×k] · b[n×k]ᵀ
pub(crate) fn gemm_nt<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    let row = |out_row: &mut [T], i: usize| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o += acc;
        }
    };
    match pool() {
        Some(p) if m * n * k >= PAR_WORK_THRESHOLD && m > 1 => p.install(|| {
            use rayon::prelude::*;
            out.par_chunks_mut(n)
                .enumerate()
                .for_each(|(i, out_row)| row(out_row, i));
        }),
        _ => {
            for (i, out_row) in out.chunks_mut(n).enumerate() {
                row(out_row, i);
            }
        }
    }
}

/// out[m×n] += a[k×m]ᵀ · b[k×n]
pub(crate) fn gemm_tn<T: Float>(m: usize, k: usize, n: usize, a: &[T], b: &[T], out: &mut [T]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    // Row-chunked so the parallel path writes disjoint output rows while
    // keeping the per-element reduction order identical to the serial path.
    let chunk = |out_chunk: &mut [T], i0: usize| {
        let rows = out_chunk.len() / n;
        for l in 0..k {
            let brow = &b[l * n..(l + 1) * n];
            for i in 0..rows {
                let av = a[l * m + i0 + i];
                let orow = &mut out_chunk[i * n..(i + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o += av * bv;
                }
            }
        }
    };
    match pool() {
        Some(p) if m * n * k >= PAR_WORK_THRESHOLD && m > 1 => p.install(|| {
            use rayon::prelude::*;
            let rows_per = m.div_ceil(p.current_num_threads().max(1));
            out.par_chunks_mut(rows_per * n)
                .enumerate()
                .for_each(|(c, out_chunk)| chunk(out_chunk, c * rows_per));
        }),
        _ => chunk(out, 0),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    out[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        out
    }

    #[test]
    fn variants_agree_with_naive() {
        let (m, k, n) = (4, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64) * 0.37 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64) * 0.11 + 0.5).collect();
        let want = naive(m, k, n, &a, &b);

        let mut out = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut out);
        assert_eq!(out, want);

        // bᵀ stored as [n×k]
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut out);
        assert_eq!(out, want);

        // aᵀ stored as [k×m]
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut out = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut out);
        assert_eq!(out, want);
    }
}
