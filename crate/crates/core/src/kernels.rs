// Dense matrix kernels on row-major slices. All of them accumulate into
// `out`, so callers zero the destination first when they want a plain product.

use crate::tensor::Scalar;

/// out[m,n] += a[m,k] * b[k,n]
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + aip * bv;
            }
        }
    }
}

/// out[m,n] += a[m,k] * b[n,k]^T
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                acc = acc + x * y;
            }
            out[i * n + j] = out[i * n + j] + acc;
        }
    }
}

/// out[m,n] += a[k,m]^T * b[k,n]
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let brow = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            let row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + api * bv;
            }
        }
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEF: f64 = 0.044_715;

/// GELU, tanh approximation.
pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let inner = c * (x + T::of(GELU_COEF) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(SQRT_2_OVER_PI);
    let k = T::of(GELU_COEF);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernels_agree_with_naive_loops() {
        let (m, k, n) = (3, 4, 5);
        let a: alloc::vec::Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: alloc::vec::Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut nn = alloc::vec![0.0; m * n];
        gemm_nn(&a, &b, &mut nn, m, k, n);
        // b^T stored as [n,k]
        let bt: alloc::vec::Vec<f64> = (0..n * k).map(|idx| b[(idx % k) * n + idx / k]).collect();
        let mut nt = alloc::vec![0.0; m * n];
        gemm_nt(&a, &bt, &mut nt, m, k, n);
        // a^T stored as [k,m]
        let at: alloc::vec::Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut tn = alloc::vec![0.0; m * n];
        gemm_tn(&at, &b, &mut tn, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((nn[i * n + j] - want).abs() < 1e-12);
                assert!((nt[i * n + j] - want).abs() < 1e-12);
                assert!((tn[i * n + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_difference_quotient() {
        for i in -40..=40 {
            let x = i as f64 * 0.2;
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((gelu_grad(x) - fd).abs() < 1e-8, "x={x}");
        }
    }
}
