use serde::Serialize;

use crate::banks::ScoreBank;
use crate::error::{invalid, Result};
use crate::numerics::{dot, Matrix};
use crate::stats::batch_covariance_oracle;

/// Class-similarity weights `a_ij = p̄_iᵀ p̄_j` from mean bank predictions.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AffinityWeights {
    pub matrix: Matrix,
    pub class_means: Vec<Vec<f64>>,
    pub populated: Vec<bool>,
}

impl AffinityWeights {
    pub fn classes(&self) -> usize {
        self.matrix.rows()
    }

    pub fn from_matrix(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return invalid("affinity matrix must be square");
        }
        let c = matrix.rows();
        Ok(Self {
            matrix,
            class_means: vec![vec![0.0; c]; c],
            populated: vec![true; c],
        })
    }
}

/// `p̄_c` is the mean of resident bank rows pseudo-labelled `c` (zero when
/// none); `a = p̄ p̄ᵀ`.
pub fn affinity_weights(sbank: &ScoreBank, pseudo_labels: &[usize]) -> Result<AffinityWeights> {
    if pseudo_labels.len() != sbank.len() {
        return invalid(format!(
            "{} pseudo-labels for {} bank rows",
            pseudo_labels.len(),
            sbank.len()
        ));
    }
    let c = sbank.classes();
    if let Some(&bad) = pseudo_labels.iter().find(|&&y| y >= c) {
        return invalid(format!("pseudo-label {bad} out of range (C = {c})"));
    }
    let mut sums = vec![vec![0.0; c]; c];
    let mut counts = vec![0usize; c];
    for (i, &y) in pseudo_labels.iter().enumerate() {
        if !sbank.is_resident(i) {
            continue;
        }
        counts[y] += 1;
        for (s, &p) in sums[y].iter_mut().zip(sbank.row(i)) {
            *s += p;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    let mut matrix = Matrix::zeros(c, c);
    for i in 0..c {
        for j in 0..c {
            matrix.set(i, j, dot(&sums[i], &sums[j]));
        }
    }
    Ok(AffinityWeights {
        matrix,
        class_means: sums,
        populated: counts.iter().map(|&n| n > 0).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdOutput {
    pub value: f64,
    /// `b x d`, ∂value/∂batch_features.
    pub grad: Matrix,
    /// No class had two or more batch rows; value and gradient are zero.
    pub degenerate: bool,
}

/// `-(1/2) Σ_{i≠j} a_ij (1 - ⟨Σ_i, Σ_j⟩_F / (‖Σ_i‖_F ‖Σ_j‖_F))` over classes
/// with at least two batch rows, where `Σ_c` is the population covariance of
/// those rows. Pairs with a zero-norm covariance are skipped.
pub fn fd_loss(
    batch_features: &Matrix,
    batch_pseudo_labels: &[usize],
    affinity: &AffinityWeights,
) -> Result<FdOutput> {
    let (b, d) = batch_features.shape();
    if batch_pseudo_labels.len() != b {
        return invalid("batch features and pseudo-labels differ in length");
    }
    let c = affinity.classes();
    if let Some(&bad) = batch_pseudo_labels.iter().find(|&&y| y >= c) {
        return invalid(format!("pseudo-label {bad} out of range (C = {c})"));
    }

    struct ClassCov {
        class: usize,
        members: Vec<usize>,
        mean: Vec<f64>,
        cov: Matrix,
        norm: f64,
    }
    let mut groups = Vec::new();
    for class in 0..c {
        let members: Vec<usize> = (0..b).filter(|&i| batch_pseudo_labels[i] == class).collect();
        if members.len() < 2 {
            continue;
        }
        let (mean, cov) = batch_covariance_oracle(&batch_features.select_rows(&members))?;
        let norm = cov.frobenius_norm();
        groups.push(ClassCov {
            class,
            members,
            mean,
            cov,
            norm,
        });
    }
    let mut grad = Matrix::zeros(b, d);
    if groups.is_empty() {
        return Ok(FdOutput {
            value: 0.0,
            grad,
            degenerate: true,
        });
    }

    let a = |i: usize, j: usize| affinity.matrix.get(i, j);
    let mut value = 0.0;
    // ∂value/∂Σ_g per group
    let mut dcov: Vec<Matrix> = groups.iter().map(|_| Matrix::zeros(d, d)).collect();
    for gi in 0..groups.len() {
        for gj in 0..groups.len() {
            if gi == gj {
                continue;
            }
            let (x, y) = (&groups[gi], &groups[gj]);
            if x.norm == 0.0 || y.norm == 0.0 {
                continue;
            }
            let w = a(x.class, y.class);
            let cos = x.cov.frobenius_dot(&y.cov) / (x.norm * y.norm);
            value += -0.5 * w * (1.0 - cos);
            // ∂cos/∂Σ_x = Σ_y/(‖Σ_x‖‖Σ_y‖) - cos Σ_x/‖Σ_x‖², and symmetrically for Σ_y
            let gx = &mut dcov[gi];
            let (s1, s2) = (0.5 * w / (x.norm * y.norm), -0.5 * w * cos / (x.norm * x.norm));
            for (g, (&ys, &xs)) in gx
                .as_mut_slice()
                .iter_mut()
                .zip(y.cov.as_slice().iter().zip(x.cov.as_slice()))
            {
                *g += s1 * ys + s2 * xs;
            }
            let gy = &mut dcov[gj];
            let (t1, t2) = (0.5 * w / (x.norm * y.norm), -0.5 * w * cos / (y.norm * y.norm));
            for (g, (&xs, &ys)) in gy
                .as_mut_slice()
                .iter_mut()
                .zip(x.cov.as_slice().iter().zip(y.cov.as_slice()))
            {
                *g += t1 * xs + t2 * ys;
            }
        }
    }
    // Σ = (1/m) Σ_k (z_k - μ)(z_k - μ)ᵀ ⇒ ∂/∂z_k = (1/m)(G + Gᵀ)(z_k - μ)
    for (group, g) in groups.iter().zip(&dcov) {
        let m = group.members.len() as f64;
        let mut sym = g.clone();
        for i in 0..d {
            for j in 0..d {
                sym.set(i, j, (g.get(i, j) + g.get(j, i)) / m);
            }
        }
        for &row in &group.members {
            let centered: Vec<f64> = batch_features
                .row(row)
                .iter()
                .zip(&group.mean)
                .map(|(z, mu)| z - mu)
                .collect();
            let out = sym.matvec(&centered)?;
            grad.row_mut(row).copy_from_slice(&out);
        }
    }
    Ok(FdOutput {
        value,
        grad,
        degenerate: false,
    })
}
