//! Streaming class-conditional mean and covariance of target features,
//! keyed by pseudo-label, merged batch by batch with the pooled update.

use serde::Serialize;

use crate::error::{invalid, Result};
use crate::numerics::{repair_psd, Matrix};

/// Eigenvalues above `-PSD_TOL * scale` count as nonnegative.
const PSD_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassStatistics {
    dim: usize,
    means: Vec<Vec<f64>>,
    covariances: Vec<Matrix>,
    counts: Vec<u64>,
}

impl ClassStatistics {
    pub fn new(classes: usize, dim: usize) -> Self {
        Self {
            dim,
            means: vec![vec![0.0; dim]; classes],
            covariances: vec![Matrix::zeros(dim, dim); classes],
            counts: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn mean(&self, c: usize) -> &[f64] {
        &self.means[c]
    }

    pub fn covariance(&self, c: usize) -> &Matrix {
        &self.covariances[c]
    }

    pub fn count(&self, c: usize) -> u64 {
        self.counts[c]
    }

    /// Folds one batch into the running statistics. For each class with `m`
    /// batch rows (batch mean `μ'`, population covariance `Σ'`):
    ///
    /// ```text
    /// n'  = n + m
    /// μ'' = (n μ + m μ') / n'
    /// Σ'' = (n Σ + m Σ') / n' + n m (μ - μ')(μ - μ')ᵀ / n'²
    /// ```
    pub fn update(&mut self, features: &Matrix, pseudo_labels: &[usize]) -> Result<()> {
        if features.rows() != pseudo_labels.len() {
            return invalid("feature rows and pseudo-labels differ in length");
        }
        if features.rows() > 0 && features.cols() != self.dim {
            return invalid(format!(
                "feature width {} != statistics dimension {}",
                features.cols(),
                self.dim
            ));
        }
        if let Some(&bad) = pseudo_labels.iter().find(|&&y| y >= self.classes()) {
            return invalid(format!("pseudo-label {bad} out of range (C = {})", self.classes()));
        }
        for c in 0..self.classes() {
            let members: Vec<usize> = pseudo_labels
                .iter()
                .enumerate()
                .filter(|(_, &y)| y == c)
                .map(|(i, _)| i)
                .collect();
            if members.is_empty() {
                continue;
            }
            let (batch_mean, batch_cov) = batch_covariance_oracle(&features.select_rows(&members))?;
            self.merge(c, members.len() as u64, &batch_mean, &batch_cov);
        }
        Ok(())
    }

    fn merge(&mut self, c: usize, m: u64, batch_mean: &[f64], batch_cov: &Matrix) {
        let n = self.counts[c] as f64;
        let mf = m as f64;
        let total = n + mf;
        let d = self.dim;
        let diff: Vec<f64> = self.means[c]
            .iter()
            .zip(batch_mean)
            .map(|(a, b)| a - b)
            .collect();
        let cross = n * mf / (total * total);
        let cov = &mut self.covariances[c];
        for i in 0..d {
            for j in 0..d {
                let v = (n * cov.get(i, j) + mf * batch_cov.get(i, j)) / total
                    + cross * diff[i] * diff[j];
                cov.set(i, j, v);
            }
        }
        cov.symmetrize();
        let scale = (0..d).map(|i| cov.get(i, i).abs()).fold(0.0, f64::max);
        if scale > 0.0 {
            repair_psd(cov, PSD_TOL * scale);
        }
        for (mu, &b) in self.means[c].iter_mut().zip(batch_mean) {
            *mu = (n * *mu + mf * b) / total;
        }
        self.counts[c] += m;
    }
}

/// Two-pass column mean and population covariance `(1/m) Σ (z-μ)(z-μ)ᵀ`.
pub fn batch_covariance_oracle(features: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    let m = features.rows();
    if m == 0 {
        return invalid("covariance of an empty sample");
    }
    let d = features.cols();
    let mut mean = vec![0.0; d];
    for r in features.row_iter() {
        for (mu, &x) in mean.iter_mut().zip(r) {
            *mu += x;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m as f64);
    let mut cov = Matrix::zeros(d, d);
    for r in features.row_iter() {
        for i in 0..d {
            let di = r[i] - mean[i];
            for j in i..d {
                cov.add_at(i, j, di * (r[j] - mean[j]));
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov.get(i, j) / m as f64;
            cov.set(i, j, v);
            cov.set(j, i, v);
        }
    }
    Ok((mean, cov))
}
