use crate::error::{invalid, Result};
use crate::numerics::{axpy, dot, Matrix};

#[derive(Debug, Clone, PartialEq)]
pub struct SncOutput {
    pub value: f64,
    /// ∂/∂p_i
    pub grad_self: Vec<f64>,
    /// ∂/∂ neighbour rows (K x C)
    pub grad_neighbors: Matrix,
    /// ∂/∂ batch rows (b x C)
    pub grad_batch: Matrix,
}

fn check_distribution(row: &[f64], what: &str) -> Result<()> {
    if row.iter().any(|p| !p.is_finite() || *p < 0.0) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return invalid(format!("{what} is not a probability distribution"));
    }
    Ok(())
}

/// `-(2/K) Σ_j p_iᵀ p_j + decay · Σ_k (p_iᵀ p_k)²` over the `K` neighbour rows
/// and the `b` batch rows, with partials for every argument treated
/// independently.
pub fn snc_loss(
    probs_i: &[f64],
    neighbor_probs: &Matrix,
    batch_probs: &Matrix,
    decay: f64,
) -> Result<SncOutput> {
    let c = probs_i.len();
    let k = neighbor_probs.rows();
    let b = batch_probs.rows();
    if k == 0 || b == 0 {
        return invalid("SNC needs at least one neighbour and one batch row");
    }
    if neighbor_probs.cols() != c || batch_probs.cols() != c {
        return invalid("SNC rows differ in class count");
    }
    check_distribution(probs_i, "query prediction")?;
    for r in neighbor_probs.row_iter() {
        check_distribution(r, "neighbour prediction")?;
    }
    for r in batch_probs.row_iter() {
        check_distribution(r, "batch prediction")?;
    }
    let attract = -2.0 / k as f64;
    let mut value = 0.0;
    let mut grad_self = vec![0.0; c];
    let mut grad_neighbors = Matrix::zeros(k, c);
    for (j, n) in neighbor_probs.row_iter().enumerate() {
        value += attract * dot(probs_i, n);
        axpy(attract, n, &mut grad_self);
        axpy(attract, probs_i, grad_neighbors.row_mut(j));
    }
    let mut grad_batch = Matrix::zeros(b, c);
    for (r, p) in batch_probs.row_iter().enumerate() {
        let s = dot(probs_i, p);
        value += decay * s * s;
        axpy(2.0 * decay * s, p, &mut grad_self);
        axpy(2.0 * decay * s, probs_i, grad_batch.row_mut(r));
    }
    Ok(SncOutput {
        value,
        grad_self,
        grad_neighbors,
        grad_batch,
    })
}

/// Pulls a gradient w.r.t. `p = softmax(l)` back to the logits:
/// `p ⊙ (g - pᵀg)`.
pub fn softmax_backward(p: &[f64], grad_p: &[f64]) -> Vec<f64> {
    let s = dot(p, grad_p);
    p.iter().zip(grad_p).map(|(pi, gi)| pi * (gi - s)).collect()
}
