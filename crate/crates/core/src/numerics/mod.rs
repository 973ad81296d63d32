//! Dense linear algebra, stable softmax, seeded randomness and Gaussian sampling.

mod gaussian;
mod matrix;
mod rng;

pub use gaussian::{
    factor_psd, repair_psd, sample_gaussian, Factorization, GaussianSampler, SYMMETRY_TOL,
};
pub use matrix::{axpy, dot, norm, Matrix};
pub use rng::SeededRng;

use crate::error::{invalid, Result};

fn check_vector(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return invalid("empty vector");
    }
    let mut max = f64::NEG_INFINITY;
    for &x in v {
        if !x.is_finite() {
            return invalid("non-finite vector entry");
        }
        max = max.max(x);
    }
    Ok(max)
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    check_vector(v)?;
    let mut out = v.to_vec();
    softmax_in_place(&mut out);
    Ok(out)
}

/// Unchecked softmax for hot loops. `v` must be nonempty and finite.
pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

pub fn logsumexp(v: &[f64]) -> Result<f64> {
    check_vector(v)?;
    Ok(logsumexp_unchecked(v))
}

/// Unchecked `log Σ exp(v_k)`. `v` must be nonempty and finite.
pub fn logsumexp_unchecked(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}
