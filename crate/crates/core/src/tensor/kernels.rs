//! Row-major dense kernels. All of them accumulate into `c`.

// Strided products from `matrixmultiply`, which picks SIMD kernels at
// run time. Every call accumulates (`beta = 1`).

/// `c[n×m] += a[n×k] · b[k×m]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    assert!(a.len() >= n * k && b.len() >= k * m && c.len() >= n * m);
    // SAFETY: the bounds above cover every element the strides reach.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            m as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c[n×m] += a[n×k] · b[m×k]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    assert!(a.len() >= n * k && b.len() >= m * k && c.len() >= n * m);
    // SAFETY: as above; `b` is read column-major.
    unsafe {
        matrixmultiply::dgemm(
            n,
            k,
            m,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// `c[k×m] += a[n×k]ᵀ · b[n×m]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], n: usize, k: usize, m: usize) {
    assert!(a.len() >= n * k && b.len() >= n * m && c.len() >= k * m);
    // SAFETY: as above; `a` is read column-major.
    unsafe {
        matrixmultiply::dgemm(
            k,
            n,
            m,
            1.0,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            m as isize,
            1,
            1.0,
            c.as_mut_ptr(),
            m as isize,
            1,
        );
    }
}

/// Dot product with four independent partial sums.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let o = c * 4;
        acc[0] += a[o] * b[o];
        acc[1] += a[o + 1] * b[o + 1];
        acc[2] += a[o + 2] * b[o + 2];
        acc[3] += a[o + 3] * b[o + 3];
    }
    let mut tail = 0.0;
    for o in chunks * 4..a.len() {
        tail += a[o] * b[o];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
        let mut c = vec![0.0; n * m];
        for i in 0..n {
            for j in 0..m {
                for p in 0..k {
                    c[i * m + j] += a[i * k + p] * b[p * m + j];
                }
            }
        }
        c
    }

    #[test]
    fn kernels_agree_with_triple_loop() {
        for (n, k, m) in [(3, 5, 7), (4, 3, 8), (9, 6, 17), (1, 1, 1), (12, 64, 64)] {
            check(n, k, m);
        }
    }

    fn transpose(x: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    fn check(n: usize, k: usize, m: usize) {
        let a: Vec<f64> = (0..n * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * m).map(|i| (i as f64 * 0.11).cos()).collect();
        let want = naive(&a, &b, n, k, m);

        let mut c = vec![0.0; n * m];
        gemm_nn(&a, &b, &mut c, n, k, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10, "{n}x{k}x{m}");
        }

        let bt = transpose(&b, k, m);
        let mut c = vec![0.0; n * m];
        gemm_nt(&a, &bt, &mut c, n, k, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10, "{n}x{k}x{m}");
        }

        let at = transpose(&a, n, k);
        let mut c = vec![0.0; n * m];
        gemm_tn(&at, &b, &mut c, k, n, m);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-10, "{n}x{k}x{m}");
        }
    }
}
