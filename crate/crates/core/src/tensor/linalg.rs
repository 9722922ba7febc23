//! Row-parallel matrix kernels over flat row-major slices.

use super::Float;
use crate::par;

/// `a[m×k] · b[k×n]`.
pub fn gemm_nn(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    par::for_each_row(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(br).for_each(|(c, &bv)| *c += av * bv);
        }
    });
    c
}

/// `a[m×k] · bᵀ` where `b` is `[n×k]`.
pub fn gemm_nt(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut c = vec![0.0; m * n];
    par::for_each_row(&mut c, n, |i, row| {
        let ar = &a[i * k..(i + 1) * k];
        for (j, out) in row.iter_mut().enumerate() {
            *out = dot(ar, &b[j * k..(j + 1) * k]);
        }
    });
    c
}

/// `aᵀ · b` where `a` is `[k×m]` and `b` is `[k×n]`.
pub fn gemm_tn(a: &[Float], b: &[Float], m: usize, k: usize, n: usize) -> Vec<Float> {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    let mut c = vec![0.0; m * n];
    par::for_each_row(&mut c, n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            row.iter_mut().zip(br).for_each(|(c, &bv)| *c += av * bv);
        }
    });
    c
}

#[inline]
pub fn dot(a: &[Float], b: &[Float]) -> Float {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `y += alpha * x`.
#[inline]
pub fn axpy(alpha: Float, x: &[Float], y: &mut [Float]) {
    y.iter_mut().zip(x).for_each(|(y, &x)| *y += alpha * x);
}
