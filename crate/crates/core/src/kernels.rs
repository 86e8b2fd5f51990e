//! Dense row-major kernels shared by the autodiff graph (f64) and the
//! forward-only inference path (f32 or f64).

use num_traits::Float;

/// Dot product with four independent accumulators so the compiler can keep
/// the lanes in registers. The reduction order is fixed, so results are
/// reproducible bit-for-bit.
#[inline]
pub fn dot<F: Float>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [F::zero(); 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] = acc[0] + x[0] * y[0];
        acc[1] = acc[1] + x[1] * y[1];
        acc[2] = acc[2] + x[2] * y[2];
        acc[3] = acc[3] + x[3] * y[3];
    }
    let mut tail = F::zero();
    for (x, y) in ra.iter().zip(rb) {
        tail = tail + *x * *y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += alpha * x`
#[inline]
pub fn axpy<F: Float>(alpha: F, x: &[F], y: &mut [F]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * *xi;
    }
}

/// `out[r, o] = sum_i x[r, i] * w[o, i] + b[o]` for `x: [rows x in]`,
/// `w: [out x in]`.
pub fn linear<F: Float>(
    x: &[F],
    w: &[F],
    b: Option<&[F]>,
    rows: usize,
    in_dim: usize,
    out_dim: usize,
    out: &mut [F],
) {
    debug_assert_eq!(x.len(), rows * in_dim);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    debug_assert_eq!(out.len(), rows * out_dim);
    for r in 0..rows {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        let orow = &mut out[r * out_dim..(r + 1) * out_dim];
        for (o, slot) in orow.iter_mut().enumerate() {
            let bias = b.map_or(F::zero(), |b| b[o]);
            *slot = dot(xr, &w[o * in_dim..(o + 1) * in_dim]) + bias;
        }
    }
}

/// `c[m x n] = a[m x k] * b[k x n]`
pub fn matmul<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize, c: &mut [F]) {
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = F::zero());
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], crow);
        }
    }
}

/// In-place layer normalization of one row with population variance.
/// Returns `1 / sqrt(var + eps)`.
pub fn layer_norm_row<F: Float>(x: &mut [F], gamma: &[F], beta: &[F], eps: F) -> F {
    let n = F::from(x.len()).unwrap();
    let mean = x.iter().fold(F::zero(), |s, &v| s + v) / n;
    let var = x.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    let inv_std = F::one() / (var + eps).sqrt();
    for ((v, g), b) in x.iter_mut().zip(gamma).zip(beta) {
        *v = (*v - mean) * inv_std * *g + *b;
    }
    inv_std
}

#[inline]
pub fn sigmoid<F: Float>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

#[inline]
pub fn relu<F: Float>(x: F) -> F {
    // NaN passes through so corrupted weights surface as a non-finite loss.
    if x > F::zero() || x.is_nan() {
        x
    } else {
        F::zero()
    }
}

/// Natural log of 2*pi.
pub const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Per-dimension diagonal Gaussian negative log-likelihood.
#[inline]
pub fn gaussian_nll<F: Float>(target: F, mu: F, logvar: F) -> F {
    let half = F::from(0.5).unwrap();
    let r = target - mu;
    half * (F::from(LN_2PI).unwrap() + logvar + r * r * (-logvar).exp())
}
