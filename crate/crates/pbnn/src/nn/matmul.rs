//! Minimal row-major matrix kernels used by the convolution and affine layers.

use crate::tensor::Scalar;

/// `c (m×n) = a (m×k) · b (k×n)`.
pub(crate) fn matmul<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for (i, crow) in c.chunks_exact_mut(n).enumerate() {
        crow.fill(F::zero());
        for (p, brow) in b.chunks_exact(n).enumerate() {
            let aip = a[i * k + p];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + aip * bv;
            }
        }
    }
}

/// `c (m×n) = a (m×k) · bᵀ` where `b` is stored n×k row-major.
pub(crate) fn matmul_nt<F: Scalar>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            c[i * n + j] = acc;
        }
    }
}

/// `c (m×n) = aᵀ · b` where `a` is stored k×m row-major and `b` is k×n.
pub(crate) fn matmul_tn<F: Scalar>(a: &[F], b: &[F], k: usize, m: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.fill(F::zero());
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + api * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x2() {
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul(&a, &b, 2, 2, 2, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transposed_variants_agree_with_plain() {
        // a: 3x2, b: 2x4
        let a = [1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0f64, 0.0, 2.0, -1.0, 3.0, 1.0, 0.0, 2.0];
        let mut c_ref = [0.0f64; 12];
        matmul(&a, &b, 3, 2, 4, &mut c_ref);

        // bᵀ stored as 4x2
        let bt = [1.0f64, 3.0, 0.0, 1.0, 2.0, 0.0, -1.0, 2.0];
        let mut c_nt = [0.0f64; 12];
        matmul_nt(&a, &bt, 3, 2, 4, &mut c_nt);
        assert_eq!(c_ref, c_nt);

        // aᵀ stored as 2x3
        let at = [1.0f64, 3.0, 5.0, 2.0, 4.0, 6.0];
        let mut c_tn = [0.0f64; 12];
        matmul_tn(&at, &b, 2, 3, 4, &mut c_tn);
        assert_eq!(c_ref, c_tn);
    }
}
