use super::Real;
use crate::exec;

#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for o in chunks * 4..a.len() {
        s += a[o] * b[o];
    }
    s
}

// Output rows per task. Row results do not depend on the blocking.
const BLOCK_ROWS: usize = 128;

/// `out = A * B` where row `i` of `A` starts at `a[i * sa.0]` and `B` is a
/// strided `k x n` view; output rows are split into independent blocks.
fn gemm_rows<T: Real>(a: &[T], sa: (usize, usize), b: &[T], sb: (usize, usize), out: &mut [T], k: usize, n: usize) {
    if n == 0 {
        return;
    }
    exec::for_each_chunk(out, BLOCK_ROWS * n, |blk, chunk| {
        let rows = chunk.len() / n;
        let a0 = blk * BLOCK_ROWS * sa.0;
        T::gemm(rows, k, n, &a[a0.min(a.len())..], sa, b, sb, chunk);
    });
}

/// `out = a (m x k) * b (k x n)`; `out` is overwritten.
pub fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(out.len(), m * n);
    gemm_rows(a, (k, 1), b, (n, 1), out, k, n);
}

/// `out = a (m x k) * b^T` where `b` is `n x k`.
pub fn matmul_nt_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), n * k);
    assert_eq!(out.len(), m * n);
    gemm_rows(a, (k, 1), b, (1, k), out, k, n);
}

/// `out = a^T * b` where `a` is `r x m` and `b` is `r x n`; `out` is `m x n`.
pub fn matmul_tn_into<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, m: usize, n: usize) {
    assert_eq!(a.len(), r * m);
    assert_eq!(b.len(), r * n);
    assert_eq!(out.len(), m * n);
    gemm_rows(a, (1, m), b, (n, 1), out, r, n);
}
