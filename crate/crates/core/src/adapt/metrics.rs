use serde::Serialize;

use crate::data::Dataset;
use crate::error::{invalid, Result};
use crate::model::Model;
use crate::numerics::argmax;

/// Classification metrics. Classes with no true samples are listed in
/// `missing_classes`, have `None` per-class accuracy, and are left out of
/// every per-class aggregate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub accuracy: f64,
    pub per_class_accuracy: Vec<Option<f64>>,
    pub per_class_mean: f64,
    /// `C / Σ_c 1/acc_c`, 0 when any class accuracy is 0.
    pub harmonic_mean: f64,
    pub macro_f1: f64,
    pub missing_classes: Vec<usize>,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

pub fn metrics_from_predictions(labels: &[usize], predictions: &[usize], classes: usize) -> Result<EvalMetrics> {
    if labels.len() != predictions.len() {
        return invalid("labels and predictions differ in length");
    }
    if labels.is_empty() {
        return invalid("no samples to evaluate");
    }
    if labels.iter().chain(predictions).any(|&y| y >= classes) {
        return invalid(format!("class index out of range (C = {classes})"));
    }
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&y, &p) in labels.iter().zip(predictions) {
        confusion[y][p] += 1;
    }
    let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let mut per_class_accuracy = Vec::with_capacity(classes);
    let mut missing_classes = Vec::new();
    let mut f1s = Vec::new();
    for c in 0..classes {
        let support: usize = confusion[c].iter().sum();
        if support == 0 {
            per_class_accuracy.push(None);
            missing_classes.push(c);
            continue;
        }
        let tp = confusion[c][c] as f64;
        let recall = tp / support as f64;
        let predicted: usize = (0..classes).map(|r| confusion[r][c]).sum();
        let precision = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        per_class_accuracy.push(Some(recall));
        f1s.push(if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        });
    }
    let present: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
    let n = present.len() as f64;
    let harmonic_mean = if present.contains(&0.0) {
        0.0
    } else {
        n / present.iter().map(|a| 1.0 / a).sum::<f64>()
    };
    Ok(EvalMetrics {
        samples: labels.len(),
        accuracy: correct as f64 / labels.len() as f64,
        per_class_mean: present.iter().sum::<f64>() / n,
        harmonic_mean,
        macro_f1: f1s.iter().sum::<f64>() / f1s.len() as f64,
        per_class_accuracy,
        missing_classes,
        confusion,
    })
}

pub fn predict(model: &Model, dataset: &Dataset) -> Result<Vec<usize>> {
    let pass = model.forward(&dataset.inputs)?;
    Ok(pass.probs.row_iter().map(argmax).collect())
}

/// The only consumer of target labels; never feeds back into adaptation.
pub fn evaluate(model: &Model, labeled: &Dataset) -> Result<EvalMetrics> {
    let Some(labels) = &labeled.labels else {
        return invalid("evaluation needs labels");
    };
    if labeled.classes != model.classes() {
        return invalid(format!(
            "dataset has {} classes, model has {}",
            labeled.classes,
            model.classes()
        ));
    }
    metrics_from_predictions(labels, &predict(model, labeled)?, model.classes())
}
