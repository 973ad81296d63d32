use crate::error::{invalid, Result};
use crate::model::{ForwardPass, GradientSet, Model};
use crate::numerics::{axpy, Matrix};

use super::fd::{fd_loss, AffinityWeights};
use super::ifa::ifa_loss;
use super::snc::{snc_loss, softmax_backward};
use super::LossBreakdown;

/// Detached quantities the step objective reads. Row `r` of every per-row
/// field refers to row `r` of the forward pass.
#[derive(Debug, Clone, Copy)]
pub struct StepTargets<'a> {
    /// One `K x C` block of neighbour predictions per batch row.
    pub neighbor_probs: &'a [Matrix],
    /// Bank predictions of the batch rows (`b x C`).
    pub batch_probs: &'a Matrix,
    pub pseudo_labels: &'a [usize],
    /// Class covariances, one per class.
    pub covariances: &'a [Matrix],
    pub affinity: &'a AffinityWeights,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub decay: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub breakdown: LossBreakdown,
    pub grads: GradientSet,
    pub fd_degenerate: bool,
}

/// One objective term in isolation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Term {
    Snc,
    Ifa,
    Fd,
}

/// `mean_i [SNC_i + α₁ IFA_i] + α₂ FD` for one batch, with exact parameter
/// gradients. Terms with a zero weight are skipped and reported as 0.
pub fn step_objective(
    model: &Model,
    pass: &ForwardPass,
    targets: &StepTargets<'_>,
    weights: &LossWeights,
) -> Result<StepOutput> {
    let (values, grads, fd_degenerate) = evaluate(
        model,
        pass,
        targets,
        weights,
        [1.0, weights.alpha1, weights.alpha2],
    )?;
    let [snc, ifa, fd] = values;
    Ok(StepOutput {
        breakdown: LossBreakdown {
            snc,
            ifa,
            fd,
            total: snc + weights.alpha1 * ifa + weights.alpha2 * fd,
            decay: weights.decay,
            lambda: weights.lambda,
        },
        grads,
        fd_degenerate,
    })
}

/// Unweighted value and gradient of a single term (batch-mean for SNC and
/// IFA). The `alpha` fields of `weights` are ignored.
pub fn term_objective(
    model: &Model,
    pass: &ForwardPass,
    targets: &StepTargets<'_>,
    weights: &LossWeights,
    term: Term,
) -> Result<(f64, GradientSet)> {
    let scales = match term {
        Term::Snc => [1.0, 0.0, 0.0],
        Term::Ifa => [0.0, 1.0, 0.0],
        Term::Fd => [0.0, 0.0, 1.0],
    };
    let (values, grads, _) = evaluate(model, pass, targets, weights, scales)?;
    let idx = term as usize;
    Ok((values[idx], grads))
}

/// Values are unweighted; gradients are of `Σ scale_t · value_t`. A zero
/// scale skips the term entirely.
fn evaluate(
    model: &Model,
    pass: &ForwardPass,
    targets: &StepTargets<'_>,
    weights: &LossWeights,
    scales: [f64; 3],
) -> Result<([f64; 3], GradientSet, bool)> {
    let b = pass.probs.rows();
    let (c, d) = (model.classes(), model.feature_dim());
    if b == 0 {
        return invalid("empty batch");
    }
    if targets.neighbor_probs.len() != b
        || targets.batch_probs.rows() != b
        || targets.pseudo_labels.len() != b
    {
        return invalid("step targets do not match the batch size");
    }
    if targets.covariances.len() != c || targets.affinity.classes() != c {
        return invalid("class statistics do not match the classifier");
    }
    if let Some(&bad) = targets.pseudo_labels.iter().find(|&&y| y >= c) {
        return invalid(format!("pseudo-label {bad} out of range (C = {c})"));
    }
    let inv_b = 1.0 / b as f64;

    let mut dlogits = Matrix::zeros(b, c);
    let mut dfeatures = Matrix::zeros(b, d);
    let mut snc = 0.0;
    if scales[0] != 0.0 {
        for r in 0..b {
            let out = snc_loss(
                pass.probs.row(r),
                &targets.neighbor_probs[r],
                targets.batch_probs,
                weights.decay,
            )?;
            snc += out.value * inv_b;
            let g = softmax_backward(pass.probs.row(r), &out.grad_self);
            axpy(scales[0] * inv_b, &g, dlogits.row_mut(r));
        }
    }

    let mut ifa = 0.0;
    let mut direct_w = Matrix::zeros(c, d);
    let mut direct_b = vec![0.0; c];
    if scales[1] != 0.0 {
        let scale = scales[1] * inv_b;
        for r in 0..b {
            let out = ifa_loss(
                pass.features.row(r),
                &targets.covariances[targets.pseudo_labels[r]],
                model.classifier_weights(),
                model.classifier_bias(),
                weights.lambda,
            )?;
            ifa += out.value * inv_b;
            axpy(scale, &out.grad_feature, dfeatures.row_mut(r));
            axpy(scale, out.grad_weights.as_slice(), direct_w.as_mut_slice());
            axpy(scale, &out.grad_bias, &mut direct_b);
        }
    }

    let mut fd = 0.0;
    let mut fd_degenerate = false;
    if scales[2] != 0.0 {
        let out = fd_loss(&pass.features, targets.pseudo_labels, targets.affinity)?;
        fd = out.value;
        fd_degenerate = out.degenerate;
        axpy(scales[2], out.grad.as_slice(), dfeatures.as_mut_slice());
    }

    let mut grads = model.backward(pass, &dlogits, &dfeatures)?;
    axpy(1.0, direct_w.as_slice(), grads.classifier_weights.as_mut_slice());
    axpy(1.0, &direct_b, &mut grads.classifier_bias);
    Ok(([snc, ifa, fd], grads, fd_degenerate))
}
