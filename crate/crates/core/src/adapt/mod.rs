//! The adaptation loop, source pretraining, pseudo-labelling and evaluation.

mod metrics;

pub use metrics::{evaluate, metrics_from_predictions, predict, EvalMetrics};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::banks::{init_banks_with_capacity, update_banks, FeatureBank, ScoreBank};
use crate::data::{checkpoint_to_string, Dataset, UnlabeledView};
use crate::error::{invalid, Diagnostic, Error, Result};
use crate::losses::{
    affinity_weights, decay_factor, lambda_schedule, step_objective, LossBreakdown, LossWeights,
    StepTargets,
};
use crate::model::{sgd_step, Architecture, Model, OptimizerState};
use crate::numerics::{argmax, Matrix, SeededRng};
use crate::stats::ClassStatistics;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha1: f64,
    pub alpha2: f64,
    pub beta: f64,
    pub lambda0: f64,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub bank_fraction: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            k: 5,
            alpha1: 1e-4,
            alpha2: 10.0,
            beta: 5.0,
            lambda0: 5.0,
            lr: 0.002,
            momentum: 0.9,
            batch_size: 64,
            epochs: 10,
            seed: 0,
            bank_fraction: 1.0,
        }
    }
}

impl AdaptConfig {
    /// Defaults for source pretraining: plain cross-entropy needs a larger
    /// step and more passes than adaptation.
    pub fn pretrain_default() -> Self {
        Self {
            lr: 0.02,
            epochs: 20,
            ..Self::default()
        }
    }

    /// Checks every field; the error names the offending one.
    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                invalid(format!("{name}: must be finite and >= 0 (got {v})"))
            }
        };
        if self.k < 1 {
            return invalid("K: must be >= 1");
        }
        nonneg("alpha1", self.alpha1)?;
        nonneg("alpha2", self.alpha2)?;
        nonneg("beta", self.beta)?;
        nonneg("lambda0", self.lambda0)?;
        nonneg("lr", self.lr)?;
        if !(0.0..1.0).contains(&self.momentum) {
            return invalid(format!("momentum: must lie in [0, 1) (got {})", self.momentum));
        }
        if self.batch_size < 2 {
            return invalid("batch_size: must be >= 2");
        }
        if self.epochs < 1 {
            return invalid("epochs: must be >= 1");
        }
        if !(self.bank_fraction > 0.0 && self.bank_fraction <= 1.0) {
            return invalid(format!("bank_fraction: must lie in (0, 1] (got {})", self.bank_fraction));
        }
        Ok(())
    }
}

/// `argmax_c p_c`, ties to the lowest index.
pub fn pseudo_label(probs: &[f64]) -> usize {
    argmax(probs)
}

fn batches(order: &[usize], batch_size: usize, min_last: usize) -> Vec<&[usize]> {
    order
        .chunks(batch_size)
        .filter(|b| b.len() >= min_last)
        .collect()
}

/// Mini-batch cross-entropy SGD on labelled source data.
#[derive(Debug, Clone)]
pub struct SourceTrainer<'a> {
    config: AdaptConfig,
    source: &'a Dataset,
    labels: &'a [usize],
    model: Model,
    optimizer: OptimizerState,
    rng: SeededRng,
    epoch_losses: Vec<f64>,
}

impl<'a> SourceTrainer<'a> {
    pub fn new(config: &AdaptConfig, arch: &Architecture, source: &'a Dataset) -> Result<Self> {
        let Some(labels) = source.labels.as_deref() else {
            return invalid("source data must be labelled");
        };
        if source.is_empty() {
            return invalid("source data is empty");
        }
        if source.classes < 2 {
            return invalid("source data needs at least 2 classes");
        }
        let root = SeededRng::new(config.seed);
        let model = Model::random(arch, source.dim(), source.classes, &mut root.split(0))?;
        let optimizer = OptimizerState::new(&model, config.lr, config.momentum);
        Ok(Self {
            config: config.clone(),
            source,
            labels,
            model,
            optimizer,
            rng: root.split(1),
            epoch_losses: Vec::new(),
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Mean cross-entropy per epoch run so far.
    pub fn epoch_losses(&self) -> &[f64] {
        &self.epoch_losses
    }

    pub fn run_epoch(&mut self) -> Result<f64> {
        let mut order: Vec<usize> = (0..self.source.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in batches(&order, self.config.batch_size, 1) {
            let pass = self.model.forward(&self.source.inputs.select_rows(batch))?;
            let b = batch.len() as f64;
            let mut dlogits = pass.probs.clone();
            for (r, &i) in batch.iter().enumerate() {
                let y = self.labels[i];
                total -= pass.probs.get(r, y).max(f64::MIN_POSITIVE).ln();
                dlogits.add_at(r, y, -1.0);
            }
            dlogits.scale(1.0 / b);
            let dfeatures = Matrix::zeros(batch.len(), self.model.feature_dim());
            let grads = self.model.backward(&pass, &dlogits, &dfeatures)?;
            sgd_step(&mut self.model, &grads, &mut self.optimizer)?;
        }
        let mean = total / self.source.len() as f64;
        self.epoch_losses.push(mean);
        Ok(mean)
    }

    pub fn into_parts(self) -> (Model, OptimizerState) {
        (self.model, self.optimizer)
    }
}

/// Trains a fresh model for `config.epochs` epochs.
pub fn pretrain_source(config: &AdaptConfig, arch: &Architecture, source: &Dataset) -> Result<(Model, OptimizerState)> {
    config.validate()?;
    let mut trainer = SourceTrainer::new(config, arch, source)?;
    for _ in 0..config.epochs {
        trainer.run_epoch()?;
    }
    Ok(trainer.into_parts())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub losses: LossBreakdown,
    /// FD had no class with two or more batch rows.
    pub fd_degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub metrics: EvalMetrics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct MetricsTrace {
    pub iterations: Vec<IterationRecord>,
    /// Filled only when an evaluation set is supplied.
    pub epochs: Vec<EpochRecord>,
}

impl MetricsTrace {
    /// `iteration,snc,ifa,fd,total,decay,lambda`
    pub fn losses_csv(&self) -> String {
        let mut out = String::from("iteration,snc,ifa,fd,total,decay,lambda\n");
        for r in &self.iterations {
            let l = &r.losses;
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.iteration, l.snc, l.ifa, l.fd, l.total, l.decay, l.lambda
            ));
        }
        out
    }
}

#[derive(Debug, Clone)]
pub struct Adaptation {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub trace: MetricsTrace,
    pub feature_bank: FeatureBank,
    pub score_bank: ScoreBank,
    pub statistics: ClassStatistics,
}

/// Iterations per epoch: full batches plus a trailing batch of at least two.
pub fn iterations_per_epoch(samples: usize, batch_size: usize) -> usize {
    samples / batch_size + usize::from(samples % batch_size >= 2)
}

/// Adapts `model` to the unlabeled target set.
pub fn adapt(config: &AdaptConfig, model: Model, target: UnlabeledView<'_>) -> Result<Adaptation> {
    adapt_with_eval(config, model, target, None)
}

/// Like [`adapt`], additionally evaluating on `eval` after every epoch. The
/// evaluation set is read-only diagnostics and does not influence training.
pub fn adapt_with_eval(
    config: &AdaptConfig,
    mut model: Model,
    target: UnlabeledView<'_>,
    eval: Option<&Dataset>,
) -> Result<Adaptation> {
    config.validate()?;
    let inputs = target.inputs;
    let m = inputs.rows();
    if target.classes != model.classes() {
        return invalid(format!(
            "target declares {} classes, model has {}",
            target.classes,
            model.classes()
        ));
    }
    if inputs.cols() != model.input_dim() {
        return invalid(format!(
            "target input width {} != model input {}",
            inputs.cols(),
            model.input_dim()
        ));
    }
    if m < config.k + 1 {
        return invalid(format!("target set of {m} samples is too small for K = {}", config.k));
    }
    let (mut fbank, mut sbank) = init_banks_with_capacity(&model, inputs, config.bank_fraction)?;
    if fbank.capacity() < config.k + 1 || fbank.capacity() < config.batch_size.min(m) {
        return invalid(format!(
            "bank_fraction: {} resident rows cannot hold a batch plus K = {} neighbours",
            fbank.capacity(),
            config.k
        ));
    }
    let (c, d) = (model.classes(), model.feature_dim());
    let mut stats = ClassStatistics::new(c, d);
    let mut optimizer = OptimizerState::new(&model, config.lr, config.momentum);
    let mut rng = SeededRng::new(config.seed).split(2);

    let per_epoch = iterations_per_epoch(m, config.batch_size);
    let total = config.epochs * per_epoch;
    let max_iter = total.saturating_sub(1).max(1);
    let mut trace = MetricsTrace::default();
    let mut iteration = 0;
    for epoch in 0..config.epochs {
        let bank_labels: Vec<usize> = sbank.probs().row_iter().map(pseudo_label).collect();
        let affinity = affinity_weights(&sbank, &bank_labels)?;
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(&mut rng);
        for batch in batches(&order, config.batch_size, 2) {
            let pass = model.forward(&inputs.select_rows(batch))?;
            update_banks(&mut fbank, &mut sbank, batch, &pass.features, &pass.probs)?;
            let neighbor_probs = batch
                .iter()
                .map(|&i| Ok(sbank.probs().select_rows(&fbank.knn(i, config.k)?.indices)))
                .collect::<Result<Vec<_>>>()?;
            let pseudo: Vec<usize> = pass.probs.row_iter().map(pseudo_label).collect();
            stats.update(&pass.features, &pseudo)?;
            let covariances: Vec<Matrix> = (0..c).map(|k| stats.covariance(k).clone()).collect();
            let batch_probs = sbank.probs().select_rows(batch);
            let weights = LossWeights {
                alpha1: config.alpha1,
                alpha2: config.alpha2,
                decay: decay_factor(iteration, max_iter, config.beta)?,
                lambda: lambda_schedule(iteration, max_iter, config.lambda0)?,
            };
            let targets = StepTargets {
                neighbor_probs: &neighbor_probs,
                batch_probs: &batch_probs,
                pseudo_labels: &pseudo,
                covariances: &covariances,
                affinity: &affinity,
            };
            let out = step_objective(&model, &pass, &targets, &weights)?;
            if !out.breakdown.is_finite() || !out.grads.is_finite() {
                return Err(Error::NonFiniteLoss(Box::new(Diagnostic {
                    epoch,
                    iteration,
                    batch_indices: batch.to_vec(),
                    breakdown: out.breakdown,
                    checkpoint: checkpoint_to_string(&model, &optimizer)?,
                })));
            }
            sgd_step(&mut model, &out.grads, &mut optimizer)?;
            trace.iterations.push(IterationRecord {
                iteration,
                epoch,
                losses: out.breakdown,
                fd_degenerate: out.fd_degenerate,
            });
            iteration += 1;
        }
        if let Some(eval) = eval {
            trace.epochs.push(EpochRecord {
                epoch,
                metrics: evaluate(&model, eval)?,
            });
        }
    }
    Ok(Adaptation {
        model,
        optimizer,
        trace,
        feature_bank: fbank,
        score_bank: sbank,
        statistics: stats,
    })
}
