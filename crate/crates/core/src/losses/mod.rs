//! Adaptation objective: spectral neighbourhood clustering (SNC), implicit
//! feature augmentation (IFA), feature disentanglement (FD), their schedules,
//! and the Monte Carlo estimate of the explicit augmentation loss that IFA
//! upper-bounds.

mod fd;
mod ifa;
mod objective;
mod snc;

pub use fd::{affinity_weights, fd_loss, AffinityWeights, FdOutput};
pub use ifa::{efa_mc_estimate, ifa_loss, IfaOutput, McEstimate};
pub use objective::{step_objective, term_objective, LossWeights, StepOutput, StepTargets, Term};
pub use snc::{snc_loss, softmax_backward, SncOutput};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Per-iteration objective terms; `total = snc + α₁·ifa + α₂·fd`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub snc: f64,
    pub ifa: f64,
    pub fd: f64,
    pub total: f64,
    pub decay: f64,
    pub lambda: f64,
}

impl LossBreakdown {
    pub fn is_finite(&self) -> bool {
        [self.snc, self.ifa, self.fd, self.total].iter().all(|v| v.is_finite())
    }
}

fn check_schedule(iter: usize, max_iter: usize) -> Result<()> {
    if max_iter == 0 {
        return invalid("max_iter must be at least 1");
    }
    if iter > max_iter {
        return invalid(format!("iter {iter} exceeds max_iter {max_iter}"));
    }
    Ok(())
}

/// `(1 + 10·iter/max_iter)^(-β)`, the weight on the SNC dispersion term.
pub fn decay_factor(iter: usize, max_iter: usize, beta: f64) -> Result<f64> {
    check_schedule(iter, max_iter)?;
    if !(beta >= 0.0) {
        return invalid("beta must be nonnegative");
    }
    Ok((1.0 + 10.0 * iter as f64 / max_iter as f64).powf(-beta))
}

/// `λ₀·iter/max_iter`, the augmentation strength ramp.
pub fn lambda_schedule(iter: usize, max_iter: usize, lambda0: f64) -> Result<f64> {
    check_schedule(iter, max_iter)?;
    Ok(lambda0 * iter as f64 / max_iter as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_spot_values() {
        assert_eq!(decay_factor(0, 100, 5.0).unwrap(), 1.0);
        let end = decay_factor(100, 100, 5.0).unwrap();
        assert!((end - 11f64.powi(-5)).abs() <= 1e-15 * 11f64.powi(-5));
        assert!((end - 6.2092e-6).abs() < 1e-9);
        for i in 0..=10 {
            assert_eq!(decay_factor(i, 10, 0.0).unwrap(), 1.0);
        }
        assert!(decay_factor(0, 0, 5.0).is_err());
    }

    #[test]
    fn lambda_spot_values() {
        assert_eq!(lambda_schedule(0, 40, 5.0).unwrap(), 0.0);
        assert_eq!(lambda_schedule(40, 40, 5.0).unwrap(), 5.0);
        assert_eq!(lambda_schedule(20, 40, 5.0).unwrap(), 2.5);
        assert!(lambda_schedule(1, 0, 5.0).is_err());
    }

    #[test]
    fn schedules_are_monotone() {
        let max = 37;
        for i in 0..max {
            assert!(decay_factor(i + 1, max, 5.0).unwrap() < decay_factor(i, max, 5.0).unwrap());
            assert!(lambda_schedule(i + 1, max, 5.0).unwrap() > lambda_schedule(i, max, 5.0).unwrap());
        }
    }
}
