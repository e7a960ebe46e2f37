//! Sequential dense kernels. Loop order is fixed so results are bit-reproducible.

use crate::tensor::Element;

/// `c[m,n] += a[m,k] · b[k,n]`. Zero entries of `a` are skipped, so a row with
/// masked (zeroed) inner units sums exactly the same terms as the row with
/// those units physically removed.
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (j, cv) in crow.iter_mut().enumerate() {
            *cv += dot(arow, &b[j * k..(j + 1) * k]);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Dot product with eight interleaved accumulators (vectorizes; order is fixed).
pub(crate) fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let xa = &a[c * 8..c * 8 + 8];
        let xb = &b[c * 8..c * 8 + 8];
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// In-place max-subtracted softmax over one row. Entries equal to `-inf` get
/// probability zero; a row with no finite entry becomes all zeros.
pub(crate) fn softmax_row<T: Element>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        row.iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_nn_small() {
        // [1 2; 3 4] · [5 6; 7 8] = [19 22; 43 50]
        let mut c = vec![0.0f32; 4];
        gemm_nn(&[1., 2., 3., 4.], &[5., 6., 7., 8.], &mut c, 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn transposed_variants_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let b = [1., 0., 2., -1., 3., 1.]; // 3x2
        let bt = [1., 2., 3., 0., -1., 1.]; // 2x3 = bᵀ
        let mut c1 = vec![0.0f32; 4];
        let mut c2 = vec![0.0; 4];
        gemm_nn(&a, &b, &mut c1, 2, 3, 2);
        gemm_nt(&a, &bt, &mut c2, 2, 3, 2);
        assert_eq!(c1, c2);
        // aᵀ·a via tn equals explicit transposed product.
        let at = [1., 4., 2., 5., 3., 6.]; // 3x2
        let mut c3 = vec![0.0f32; 9];
        let mut c4 = vec![0.0; 9];
        gemm_tn(&a, &a, &mut c3, 2, 3, 3);
        gemm_nn(&at, &a, &mut c4, 3, 2, 3);
        assert_eq!(c3, c4);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let expect: f32 = a.iter().map(|x| x * x).sum();
        assert_eq!(dot(&a, &a), expect);
    }

    #[test]
    fn softmax_row_masked() {
        let mut r = [0.0f32, f32::NEG_INFINITY, 0.0];
        softmax_row(&mut r);
        assert_eq!(r, [0.5, 0.0, 0.5]);
        let mut all = [f32::NEG_INFINITY; 3];
        softmax_row(&mut all);
        assert_eq!(all, [0.0; 3]);
    }
}
