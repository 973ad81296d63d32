use serde::Serialize;

use crate::error::{invalid, Result};
use crate::numerics::{logsumexp_unchecked, Matrix, SeededRng, GaussianSampler, SYMMETRY_TOL};

#[derive(Debug, Clone, PartialEq)]
pub struct IfaOutput {
    pub value: f64,
    pub grad_feature: Vec<f64>,
    /// `C x d`, same layout as the classifier weights.
    pub grad_weights: Matrix,
    pub grad_bias: Vec<f64>,
}

fn check_shapes(feature: &[f64], cov: &Matrix, w: &Matrix, b: &[f64]) -> Result<()> {
    let d = feature.len();
    if w.cols() != d || w.rows() != b.len() || w.rows() == 0 {
        return invalid(format!(
            "classifier {:?} / bias {} incompatible with feature dimension {d}",
            w.shape(),
            b.len()
        ));
    }
    if cov.shape() != (d, d) {
        return invalid(format!("covariance {:?} must be {d}x{d}", cov.shape()));
    }
    if !cov.is_symmetric(SYMMETRY_TOL) {
        return invalid("covariance is not symmetric");
    }
    if feature.iter().chain(b).any(|v| !v.is_finite()) || !w.is_finite() || !cov.is_finite() {
        return invalid("non-finite IFA input");
    }
    Ok(())
}

/// Closed-form upper bound on the expected explicit-augmentation loss:
///
/// ```text
/// -2 Σ_c [ l_c - log Σ_c' exp(l_c' + (λ/2) q_cc') ],   q_cc' = (w_c' - w_c)ᵀ Σ (w_c' - w_c)
/// ```
///
/// with `l = W z + b`. `Σ` is a constant (no gradient).
pub fn ifa_loss(feature: &[f64], cov: &Matrix, w: &Matrix, b: &[f64], lambda: f64) -> Result<IfaOutput> {
    check_shapes(feature, cov, w, b)?;
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return invalid("lambda must be finite and nonnegative");
    }
    let c = w.rows();
    let d = feature.len();
    let logits: Vec<f64> = (0..c)
        .map(|k| b[k] + crate::numerics::dot(w.row(k), feature))
        .collect();

    // G = W Σ Wᵀ, so q_cc' = G_c'c' - G_cc' - G_c'c + G_cc
    let ws = w.matmul(cov)?; // C x d
    let gram = ws.matmul(&w.transpose())?;
    let q = |a: usize, bb: usize| gram.get(bb, bb) - gram.get(a, bb) - gram.get(bb, a) + gram.get(a, a);

    let mut value = 0.0;
    let mut grad_logits = vec![-2.0; c];
    // H accumulates ∂value/∂G
    let mut h = Matrix::zeros(c, c);
    let mut shifted = vec![0.0; c];
    for cls in 0..c {
        for (k, s) in shifted.iter_mut().enumerate() {
            *s = logits[k] + 0.5 * lambda * q(cls, k);
        }
        let lse = logsumexp_unchecked(&shifted);
        value += -2.0 * (logits[cls] - lse);
        for k in 0..c {
            let pi = (shifted[k] - lse).exp();
            grad_logits[k] += 2.0 * pi;
            // ∂value/∂q_{cls,k} = λ π
            let m = lambda * pi;
            if m != 0.0 && k != cls {
                h.add_at(k, k, m);
                h.add_at(cls, cls, m);
                h.add_at(cls, k, -m);
                h.add_at(k, cls, -m);
            }
        }
    }

    let mut grad_feature = vec![0.0; d];
    let mut grad_weights = Matrix::zeros(c, d);
    for k in 0..c {
        crate::numerics::axpy(grad_logits[k], w.row(k), &mut grad_feature);
        for (g, &z) in grad_weights.row_mut(k).iter_mut().zip(feature) {
            *g = grad_logits[k] * z;
        }
    }
    if lambda > 0.0 {
        // ∂value/∂W from the quadratic terms: (H + Hᵀ) W Σ
        let mut hs = h.clone();
        for i in 0..c {
            for j in 0..c {
                hs.set(i, j, h.get(i, j) + h.get(j, i));
            }
        }
        let quad = hs.matmul(&ws)?;
        for (g, q) in grad_weights.as_mut_slice().iter_mut().zip(quad.as_slice()) {
            *g += q;
        }
    }
    Ok(IfaOutput {
        value,
        grad_feature,
        grad_weights,
        grad_bias: grad_logits,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
    pub n_pairs: usize,
}

/// Monte Carlo estimate of `E[-log p̃_jᵀ p̃_k]` for independent
/// `z̃_j, z̃_k ~ N(z, λΣ)` and `p̃ = softmax(W z̃ + b)`.
pub fn efa_mc_estimate(
    feature: &[f64],
    cov: &Matrix,
    w: &Matrix,
    b: &[f64],
    lambda: f64,
    n_pairs: usize,
    rng: &mut SeededRng,
) -> Result<McEstimate> {
    check_shapes(feature, cov, w, b)?;
    if n_pairs < 2 {
        return invalid("need at least two Monte Carlo pairs");
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return invalid("lambda must be finite and nonnegative");
    }
    let mut scaled = cov.clone();
    scaled.scale(lambda);
    let sampler = GaussianSampler::new(feature, &scaled)?;
    let (c, d) = w.shape();
    let mut scratch = vec![0.0; d];
    let mut zj = vec![0.0; d];
    let mut zk = vec![0.0; d];
    let mut lj = vec![0.0; c];
    let mut lk = vec![0.0; c];
    let mut joint = vec![0.0; c];

    // Welford
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for n in 1..=n_pairs {
        sampler.sample_into(rng, &mut scratch, &mut zj);
        sampler.sample_into(rng, &mut scratch, &mut zk);
        log_softmax_into(w, b, &zj, &mut lj);
        log_softmax_into(w, b, &zk, &mut lk);
        for k in 0..c {
            joint[k] = lj[k] + lk[k];
        }
        let x = -logsumexp_unchecked(&joint);
        let delta = x - mean;
        mean += delta / n as f64;
        m2 += delta * (x - mean);
    }
    let var = m2 / (n_pairs - 1) as f64;
    Ok(McEstimate {
        mean,
        stderr: (var.max(0.0) / n_pairs as f64).sqrt(),
        n_pairs,
    })
}

fn log_softmax_into(w: &Matrix, b: &[f64], z: &[f64], out: &mut [f64]) {
    for (k, o) in out.iter_mut().enumerate() {
        *o = b[k] + crate::numerics::dot(w.row(k), z);
    }
    let lse = logsumexp_unchecked(out);
    out.iter_mut().for_each(|v| *v -= lse);
}
