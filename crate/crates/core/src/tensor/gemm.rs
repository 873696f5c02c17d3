//! Small dense matrix kernels behind the convolutions.
//!
//! Every output element of [`gemm`] is accumulated strictly in increasing `k`
//! starting from zero, independent of blocking or of where the element sits in
//! the output. Two convolutions that see the same column of patches therefore
//! produce bitwise-identical values.

use super::Scalar;

const MR: usize = 4;
const NC: usize = 256;

/// `c = a · b` with `a: m×k`, `b: k×n`, `c: m×n`, all row-major.
pub(crate) fn gemm<T: Scalar>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let mut acc = vec![T::zero(); MR * NC];
    let mut j0 = 0;
    while j0 < n {
        let nc = NC.min(n - j0);
        let mut i0 = 0;
        while i0 < m {
            let mr = MR.min(m - i0);
            acc.iter_mut().for_each(|v| *v = T::zero());
            if mr == MR {
                let (acc0, rest) = acc.split_at_mut(NC);
                let (acc1, rest) = rest.split_at_mut(NC);
                let (acc2, acc3) = rest.split_at_mut(NC);
                let (a0r, a1r, a2r, a3r) = (
                    &a[i0 * k..(i0 + 1) * k],
                    &a[(i0 + 1) * k..(i0 + 2) * k],
                    &a[(i0 + 2) * k..(i0 + 3) * k],
                    &a[(i0 + 3) * k..(i0 + 4) * k],
                );
                for p in 0..k {
                    let brow = &b[p * n + j0..p * n + j0 + nc];
                    let (a0, a1, a2, a3) = (a0r[p], a1r[p], a2r[p], a3r[p]);
                    for ((((c0, c1), c2), c3), &bv) in acc0[..nc]
                        .iter_mut()
                        .zip(acc1[..nc].iter_mut())
                        .zip(acc2[..nc].iter_mut())
                        .zip(acc3[..nc].iter_mut())
                        .zip(brow)
                    {
                        *c0 = *c0 + a0 * bv;
                        *c1 = *c1 + a1 * bv;
                        *c2 = *c2 + a2 * bv;
                        *c3 = *c3 + a3 * bv;
                    }
                }
            } else {
                for p in 0..k {
                    let brow = &b[p * n + j0..p * n + j0 + nc];
                    for (r, row) in acc.chunks_mut(NC).take(mr).enumerate() {
                        let av = a[(i0 + r) * k + p];
                        for (cv, &bv) in row[..nc].iter_mut().zip(brow) {
                            *cv = *cv + av * bv;
                        }
                    }
                }
            }
            for (r, row) in acc.chunks(NC).take(mr).enumerate() {
                c[(i0 + r) * n + j0..(i0 + r) * n + j0 + nc].copy_from_slice(&row[..nc]);
            }
            i0 += mr;
        }
        j0 += nc;
    }
}

/// `c += a · bᵀ` with `a: m×n`, `b: k×n`, `c: m×k`.
pub(crate) fn gemm_nt_acc<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * k);
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for j in 0..k {
            let brow = &b[j * n..(j + 1) * n];
            c[i * k + j] = c[i * k + j] + dot(arow, brow);
        }
    }
}

/// Dot product with eight interleaved partial sums in a fixed order.
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut lanes = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ta, tb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            lanes[l] = lanes[l] + x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for l in lanes {
        s = s + l;
    }
    for (x, y) in ta.iter().zip(tb) {
        s = s + *x * *y;
    }
    s
}

/// Row-major transpose of an `r×c` matrix.
pub(crate) fn transpose<T: Scalar>(r: usize, c: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    #[test]
    fn gemm_matches_sequential_sum_bitwise() {
        for &(m, k, n) in &[(1, 1, 1), (3, 5, 7), (4, 9, 300), (7, 13, 513), (9, 2, 3)] {
            let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 11) as f64 - 5.0) * 0.37).collect();
            let b: Vec<f64> = (0..k * n).map(|i| ((i * 17 % 13) as f64 - 6.0) * 0.21).collect();
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, &a, &b, &mut c);
            assert_eq!(c, naive(m, k, n, &a, &b), "{m}x{k}x{n}");
        }
    }

    #[test]
    fn nt_matches_naive() {
        let (m, n, k) = (3, 19, 4);
        let a: Vec<f64> = (0..m * n).map(|i| (i as f64).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).cos()).collect();
        let mut c = vec![1.0; m * k];
        gemm_nt_acc(m, n, k, &a, &b, &mut c);
        for i in 0..m {
            for j in 0..k {
                let s: f64 = (0..n).map(|p| a[i * n + p] * b[j * n + p]).sum();
                assert!((c[i * k + j] - 1.0 - s).abs() < 1e-12);
            }
        }
    }
}
