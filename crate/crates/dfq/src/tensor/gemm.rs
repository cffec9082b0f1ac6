//! Safe wrapper around `matrixmultiply::sgemm`.
//!
//! One call covers all four transpose layouts via strides, so conv and
//! matmul backward never materialize transposed matrices. The kernel runs
//! single-threaded and accumulates each output element in a fixed k-order;
//! callers parallelize over disjoint output regions only.

/// C[m×n] = alpha · op(A)·op(B) + beta · C, all row-major slices.
///
/// `lda`/`ldb` are the row strides of the *stored* matrices; `ta`/`tb`
/// select the transposed interpretation. `ldc` is the row stride of C.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    lda: usize,
    ta: bool,
    b: &[f32],
    ldb: usize,
    tb: bool,
    beta: f32,
    c: &mut [f32],
    ldc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1isize, lda as isize) } else { (lda as isize, 1isize) };
    let (rsb, csb) = if tb { (1isize, ldb as isize) } else { (ldb as isize, 1isize) };
    // highest element touched in each operand
    let a_max = (m - 1) as isize * rsa + (k.max(1) - 1) as isize * csa;
    let b_max = (k.max(1) - 1) as isize * rsb + (n - 1) as isize * csb;
    let c_max = (m - 1) * ldc + (n - 1);
    assert!(a_max >= 0 && (a_max as usize) < a.len(), "gemm: A out of bounds");
    assert!(b_max >= 0 && (b_max as usize) < b.len(), "gemm: B out of bounds");
    assert!(c_max < c.len(), "gemm: C out of bounds");
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f32], b: &[f32]) -> Vec<f32> {
        let mut c = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for p in 0..k {
                    acc += a[i * k + p] as f64 * b[p * n + j] as f64;
                }
                c[i * n + j] = acc as f32;
            }
        }
        c
    }

    #[test]
    fn matches_naive_all_layouts() {
        let (m, k, n) = (5, 7, 4);
        let a: Vec<f32> = (0..m * k).map(|i| (i as f32 * 0.37).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i as f32 * 0.11).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, k, false, &b, n, false, 0.0, &mut c, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }

        // transposed storage of A: store Aᵀ (k×m) and ask for ta
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let mut c2 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &at, m, true, &b, n, false, 0.0, &mut c2, n);
        for (x, y) in c2.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }

        // transposed storage of B: store Bᵀ (n×k) and ask for tb
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut c3 = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, k, false, &bt, k, true, 0.0, &mut c3, n);
        for (x, y) in c3.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn beta_accumulates() {
        let a = [1.0f32, 2.0];
        let b = [3.0f32, 4.0];
        let mut c = vec![10.0f32];
        gemm(1, 2, 1, 1.0, &a, 2, false, &b, 1, false, 1.0, &mut c, 1);
        assert_eq!(c[0], 10.0 + 11.0);
    }

    /// Row-chunked calls must reproduce the one-shot result bitwise; the
    /// batch-parallel conv path relies on this.
    #[test]
    fn row_chunks_bitwise_equal() {
        let (m, k, n) = (33, 129, 17);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 2654435761usize) as f32 * 1e-9).fract() - 0.5).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 40503usize) as f32 * 1e-7).fract() - 0.5).collect();
        let mut full = vec![0.0; m * n];
        gemm(m, k, n, 1.0, &a, k, false, &b, n, false, 0.0, &mut full, n);

        let mut chunked = vec![0.0; m * n];
        let rows_per = 8;
        let mut r0 = 0;
        while r0 < m {
            let rows = rows_per.min(m - r0);
            gemm(
                rows,
                k,
                n,
                1.0,
                &a[r0 * k..],
                k,
                false,
                &b,
                n,
                false,
                0.0,
                &mut chunked[r0 * n..],
                n,
            );
            r0 += rows;
        }
        for (x, y) in full.iter().zip(&chunked) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }
}
