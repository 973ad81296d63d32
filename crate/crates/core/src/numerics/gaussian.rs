use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::StandardNormal;

use super::{Matrix, SeededRng};
use crate::error::{invalid, Error, Result};

/// Symmetry tolerance accepted for covariance inputs.
pub const SYMMETRY_TOL: f64 = 1e-9;

const JITTER_START: f64 = 1e-12;
const JITTER_MAX: f64 = 1e-6;

/// How a covariance was factored into `L Lᵀ`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Factorization {
    /// Cholesky, allowing exactly-degenerate directions (zero columns).
    Cholesky,
    /// Cholesky of `cov + jitter·I`.
    Jittered(f64),
    /// `V·sqrt(max(Λ, 0))` from a symmetric eigendecomposition.
    EigenClamped,
}

/// Factor `L` with `L Lᵀ ≈ cov` for a symmetric PSD (or slightly indefinite) `cov`.
pub fn factor_psd(cov: &Matrix) -> Result<(Matrix, Factorization)> {
    if !cov.is_square() {
        return invalid(format!("covariance must be square, got {:?}", cov.shape()));
    }
    if !cov.is_finite() {
        return invalid("covariance has non-finite entries");
    }
    if !cov.is_symmetric(SYMMETRY_TOL) {
        return invalid("covariance is not symmetric");
    }
    if let Some(l) = cholesky(cov, true) {
        return Ok((l, Factorization::Cholesky));
    }
    let n = cov.rows();
    let mut jitter = JITTER_START;
    while jitter <= JITTER_MAX * 1.000_001 {
        let mut shifted = cov.clone();
        for i in 0..n {
            shifted.add_at(i, i, jitter);
        }
        if let Some(l) = cholesky(&shifted, false) {
            return Ok((l, Factorization::Jittered(jitter)));
        }
        jitter *= 10.0;
    }
    eigen_clamped_factor(cov).map(|l| (l, Factorization::EigenClamped))
}

/// Lower Cholesky factor. With `allow_degenerate`, a pivot that is zero up to
/// rounding (and whose column below is also zero) produces a zero column,
/// which keeps exactly-singular covariances exact.
fn cholesky(a: &Matrix, allow_degenerate: bool) -> Option<Matrix> {
    let n = a.rows();
    let scale = (0..n).map(|i| a.get(i, i).abs()).fold(1.0, f64::max);
    let tol = 1e-14 * scale;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l.get(j, k) * l.get(j, k);
        }
        if pivot > tol {
            let d = pivot.sqrt();
            l.set(j, j, d);
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                l.set(i, j, s / d);
            }
        } else if allow_degenerate && pivot >= -tol {
            for i in (j + 1)..n {
                let mut s = a.get(i, j);
                for k in 0..j {
                    s -= l.get(i, k) * l.get(j, k);
                }
                if s.abs() > tol {
                    return None;
                }
            }
        } else {
            return None;
        }
    }
    Some(l)
}

fn eigen_clamped_factor(cov: &Matrix) -> Result<Matrix> {
    let n = cov.rows();
    let m = DMatrix::from_row_slice(n, n, cov.as_slice());
    let eig = SymmetricEigen::new(m);
    let mut l = Matrix::zeros(n, n);
    for c in 0..n {
        let s = eig.eigenvalues[c].max(0.0).sqrt();
        for r in 0..n {
            l.set(r, c, eig.eigenvectors[(r, c)] * s);
        }
    }
    if !l.is_finite() {
        return Err(Error::Numerical(
            "eigendecomposition of covariance produced non-finite values".into(),
        ));
    }
    Ok(l)
}

/// Projects a symmetric matrix onto the PSD cone when it has eigenvalues below
/// `-tol`; otherwise leaves it untouched. Returns whether a repair happened.
pub fn repair_psd(m: &mut Matrix, tol: f64) -> bool {
    let n = m.rows();
    let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, m.as_slice()));
    if eig.eigenvalues.iter().all(|&v| v >= -tol) {
        return false;
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let rebuilt = &eig.eigenvectors
        * DMatrix::from_diagonal(&clamped)
        * eig.eigenvectors.transpose();
    for r in 0..n {
        for c in 0..n {
            m.set(r, c, rebuilt[(r, c)]);
        }
    }
    m.symmetrize();
    true
}

/// Reusable sampler for `N(mean, cov)`.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    mean: Vec<f64>,
    factor: Matrix,
    method: Factorization,
}

impl GaussianSampler {
    pub fn new(mean: &[f64], cov: &Matrix) -> Result<Self> {
        if cov.rows() != mean.len() {
            return invalid(format!(
                "mean has dimension {} but covariance is {:?}",
                mean.len(),
                cov.shape()
            ));
        }
        if mean.iter().any(|v| !v.is_finite()) {
            return invalid("mean has non-finite entries");
        }
        let (factor, method) = factor_psd(cov)?;
        Ok(Self {
            mean: mean.to_vec(),
            factor,
            method,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn factorization(&self) -> Factorization {
        self.method
    }

    /// Writes one draw into `out`, using `scratch` (length `dim`) for the
    /// standard-normal vector.
    pub fn sample_into(&self, rng: &mut SeededRng, scratch: &mut [f64], out: &mut [f64]) {
        let d = self.dim();
        for s in scratch.iter_mut() {
            *s = rng.sample(StandardNormal);
        }
        for r in 0..d {
            let row = self.factor.row(r);
            let mut acc = self.mean[r];
            for (l, e) in row.iter().zip(scratch.iter()) {
                acc += l * e;
            }
            out[r] = acc;
        }
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Vec<f64> {
        let mut scratch = vec![0.0; self.dim()];
        let mut out = vec![0.0; self.dim()];
        self.sample_into(rng, &mut scratch, &mut out);
        out
    }
}

/// Draws `n` samples from `N(mean, cov)`.
pub fn sample_gaussian(
    mean: &[f64],
    cov: &Matrix,
    n: usize,
    rng: &mut SeededRng,
) -> Result<Vec<Vec<f64>>> {
    let sampler = GaussianSampler::new(mean, cov)?;
    Ok((0..n).map(|_| sampler.sample(rng)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reconstruct(l: &Matrix) -> Matrix {
        l.matmul(&l.transpose()).unwrap()
    }

    #[test]
    fn zero_covariance_gives_copies_of_mean() {
        let mut rng = SeededRng::new(1);
        let s = sample_gaussian(&[1.0, 2.0], &Matrix::zeros(2, 2), 3, &mut rng).unwrap();
        assert_eq!(s, vec![vec![1.0, 2.0]; 3]);
    }

    #[test]
    fn degenerate_direction_is_exact() {
        let mut rng = SeededRng::new(2);
        let cov = Matrix::from_diag(&[4.0, 0.0]);
        let s = sample_gaussian(&[0.5, -3.0], &cov, 100_000, &mut rng).unwrap();
        assert!(s.iter().all(|x| x[1] == -3.0));
        assert!(s.iter().any(|x| x[0] != 0.5));
    }

    #[test]
    fn asymmetric_or_mismatched_rejected() {
        let cov = Matrix::from_rows(&[[1.0, 0.5], [0.0, 1.0]]).unwrap();
        assert!(matches!(
            GaussianSampler::new(&[0.0, 0.0], &cov),
            Err(Error::InvalidInput(_))
        ));
        assert!(GaussianSampler::new(&[0.0], &Matrix::identity(2)).is_err());
    }

    #[test]
    fn slightly_indefinite_falls_back() {
        // eigenvalues 2 and -1e-4: too negative for jitter, needs the eigen clamp
        let cov = Matrix::from_rows(&[[1.0 - 0.5e-4, 1.0 + 0.5e-4], [1.0 + 0.5e-4, 1.0 - 0.5e-4]])
            .unwrap();
        let (l, method) = factor_psd(&cov).unwrap();
        assert_eq!(method, Factorization::EigenClamped);
        let r = reconstruct(&l);
        assert!((r.get(0, 1) - 1.0).abs() < 1e-3);

        // eigenvalue -1e-10: rescued by jitter
        let eps = 1e-10;
        let cov = Matrix::from_rows(&[[1.0, 0.0], [0.0, -eps]]).unwrap();
        let (_, method) = factor_psd(&cov).unwrap();
        assert!(matches!(method, Factorization::Jittered(_)), "{method:?}");
    }

    #[test]
    fn full_rank_cholesky_reconstructs() {
        let cov = Matrix::from_rows(&[[4.0, 1.0, 0.5], [1.0, 3.0, 0.2], [0.5, 0.2, 2.0]]).unwrap();
        let (l, method) = factor_psd(&cov).unwrap();
        assert_eq!(method, Factorization::Cholesky);
        assert!(reconstruct(&l).max_abs_diff(&cov) < 1e-12);
    }

    #[test]
    fn repair_only_when_indefinite() {
        let mut psd = Matrix::from_diag(&[1.0, 0.0]);
        assert!(!repair_psd(&mut psd, 1e-12));
        assert_eq!(psd, Matrix::from_diag(&[1.0, 0.0]));
        let mut bad = Matrix::from_diag(&[1.0, -0.5]);
        assert!(repair_psd(&mut bad, 1e-12));
        assert!((bad.get(1, 1)).abs() < 1e-15);
    }
}
