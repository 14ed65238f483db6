//! Scalar kernels on top of `libm` (usable without `std`).

use core::f64::consts::{FRAC_1_SQRT_2, PI};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) / libm::sqrt(2.0 * PI);
    cdf + x * pdf
}

/// Replace `row` by `softmax(scale * row)`; returns the log-sum-exp of the
/// scaled row.
pub fn softmax_in_place(row: &mut [f64], scale: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for v in row.iter_mut() {
        *v *= scale;
        max = max.max(*v);
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
    max + libm::log(sum)
}
