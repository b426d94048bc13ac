// Dense products on row-major buffers.

use super::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn matmul_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    F::gemm_acc(m, k, n, a, [k_, 1], b, [n_, 1], c, [n_, 1]);
}

pub(crate) fn matmul<F: Real>(a: &[F], b: &[F], m: usize, k: usize, n: usize) -> Vec<F> {
    let mut c = vec![F::zero(); m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[k×n] += aᵀ · b` with `a[m×k]`, `b[m×n]`.
pub(crate) fn matmul_tn_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, k: usize, n: usize) {
    let (k_, n_) = (k as isize, n as isize);
    F::gemm_acc(k, m, n, a, [1, k_], b, [n_, 1], c, [n_, 1]);
}

/// `c[m×k] += a[m×n] · bᵀ` with `b[k×n]`.
pub(crate) fn matmul_nt_acc<F: Real>(a: &[F], b: &[F], c: &mut [F], m: usize, n: usize, k: usize) {
    let (k_, n_) = (k as isize, n as isize);
    F::gemm_acc(m, n, k, a, [n_, 1], b, [1, n_], c, [k_, 1]);
}

pub(crate) fn transpose<F: Real>(a: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
