//! Property checks of the losses and estimators against independent
//! evaluations. Each suite has a negative control that deliberately breaks one
//! formula; a control run must report failures.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::banks::banks_from_rows;
use crate::error::{invalid, Result};
use crate::losses::{
    efa_mc_estimate, ifa_loss, snc_loss, step_objective, term_objective, AffinityWeights,
    LossWeights, StepTargets, Term,
};
use crate::model::{finite_diff_check, Activation, Architecture, DenseLayer, GradientSet, Model};
use crate::numerics::{dot, logsumexp, norm, softmax, Matrix, SeededRng};
use crate::stats::{batch_covariance_oracle, ClassStatistics};

/// Central-difference step for every gradient check.
pub const GRADIENT_STEP: f64 = 2e-4;
pub const GRADIENT_TOL: f64 = 1e-4;
pub const FACTORIZATION_TOL: f64 = 1e-8;
pub const STATS_TOL: f64 = 1e-9;
pub const SOFTMAX_TOL: f64 = 1e-12;
/// Bound slack is measured in units of the Monte Carlo standard error.
pub const BOUND_STDERRS: f64 = 3.0;

const SYMMETRIC_RESAMPLES: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Failure {
    pub trial: usize,
    pub reason: String,
    /// Everything needed to rebuild the failing case.
    pub instance: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum WorstKind {
    /// Smallest `bound + 3·stderr - mean`; negative means a violation.
    MinSlack,
    MaxError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub suite: String,
    pub negative_control: bool,
    pub trials: usize,
    pub failures: Vec<Failure>,
    pub worst: f64,
    pub worst_kind: WorstKind,
    pub passed: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub sections: Vec<VerifyReport>,
}

impl VerifyReport {
    fn new(suite: &str, negative_control: bool, kind: WorstKind) -> Self {
        Self {
            suite: suite.to_string(),
            negative_control,
            trials: 0,
            failures: Vec::new(),
            worst: match kind {
                WorstKind::MinSlack => f64::INFINITY,
                WorstKind::MaxError => 0.0,
            },
            worst_kind: kind,
            passed: true,
            sections: Vec::new(),
        }
    }

    fn record(&mut self, trial: usize, metric: f64, failure: Option<(String, Value)>) {
        self.trials += 1;
        self.worst = match self.worst_kind {
            WorstKind::MinSlack => self.worst.min(metric),
            WorstKind::MaxError => self.worst.max(metric),
        };
        if let Some((reason, instance)) = failure {
            self.failures.push(Failure {
                trial,
                reason,
                instance,
            });
        }
        self.passed = self.failures.is_empty();
    }

    /// Folds same-kind section reports into one; failures keep their section
    /// name as a reason prefix.
    fn combine(suite: &str, sections: Vec<VerifyReport>) -> Self {
        let control = sections.iter().any(|s| s.negative_control);
        let mut out = VerifyReport::new(suite, control, WorstKind::MaxError);
        for s in &sections {
            out.trials += s.trials;
            out.worst = out.worst.max(s.worst);
            out.failures.extend(s.failures.iter().map(|f| Failure {
                reason: format!("{}: {}", s.suite, f.reason),
                ..f.clone()
            }));
        }
        out.passed = out.failures.is_empty();
        out.sections = sections;
        out
    }
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    m.row_iter().map(<[f64]>::to_vec).collect()
}

fn gaussian_vec(n: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..n).map(|_| rng.sample(StandardNormal)).collect()
}

fn gaussian_matrix(r: usize, c: usize, rng: &mut SeededRng) -> Matrix {
    Matrix::new(r, c, gaussian_vec(r * c, rng)).expect("shape matches data")
}

/// `A Aᵀ` for Gaussian `A`, rescaled to trace `d`.
fn random_psd(d: usize, rng: &mut SeededRng) -> Matrix {
    let a = gaussian_matrix(d, d, rng);
    let mut s = a.matmul(&a.transpose()).expect("square");
    let tr: f64 = (0..d).map(|i| s.get(i, i)).sum();
    s.scale(d as f64 / tr);
    s.symmetrize();
    s
}

fn random_distribution(c: usize, scale: f64, rng: &mut SeededRng) -> Vec<f64> {
    let logits: Vec<f64> = gaussian_vec(c, rng).into_iter().map(|v| v * scale).collect();
    softmax(&logits).expect("finite logits")
}

fn random_distributions(n: usize, c: usize, scale: f64, rng: &mut SeededRng) -> Matrix {
    let data = (0..n).flat_map(|_| random_distribution(c, scale, rng)).collect();
    Matrix::new(n, c, data).expect("shape matches data")
}

// ---------------------------------------------------------------------------
// IFA upper bound

/// Which λ the bound side of each trial uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoundVariant {
    Exact,
    /// Every trial draws λ = 0; samples then equal the feature and the gap
    /// is the deterministic `-2 Σ_c log p_c + log Σ_c p_c²`.
    LambdaZero,
    /// The closed form is evaluated at λ/2 while the samples use λ. Too weak
    /// to break the bound, whose class sum leaves a wide margin.
    HalvedLambda,
    /// Negative control: the curvature term enters the log-partition with
    /// the wrong sign, `l_c' - (λ/2) q_cc'`.
    FlippedCurvature,
}

impl BoundVariant {
    pub fn is_control(self) -> bool {
        matches!(self, BoundVariant::HalvedLambda | BoundVariant::FlippedCurvature)
    }
}

/// Checks `E[-log p̃_jᵀp̃_k] ≤ IFA` by Monte Carlo on random instances.
pub fn verify_ifa_bound(trials: usize, n_pairs: usize, seed: u64) -> Result<VerifyReport> {
    verify_ifa_bound_with(trials, n_pairs, seed, BoundVariant::Exact)
}

pub fn verify_ifa_bound_with(
    trials: usize,
    n_pairs: usize,
    seed: u64,
    variant: BoundVariant,
) -> Result<VerifyReport> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    if n_pairs < 10_000 {
        return invalid("need at least 10^4 Monte Carlo pairs per trial");
    }
    let root = SeededRng::new(seed);
    let outcomes = (0..trials)
        .into_par_iter()
        .map(|t| ifa_bound_trial(&mut root.split(t as u64), n_pairs, variant))
        .collect::<Result<Vec<_>>>()?;
    let mut report = VerifyReport::new(
        "ifa-bound",
        variant.is_control(),
        WorstKind::MinSlack,
    );
    for (t, (slack, instance)) in outcomes.into_iter().enumerate() {
        let failure = (slack < 0.0).then(|| {
            (
                format!("Monte Carlo mean exceeds bound + 3 stderr by {:.3e}", -slack),
                instance,
            )
        });
        report.record(t, slack, failure);
    }
    Ok(report)
}

fn ifa_bound_trial(rng: &mut SeededRng, n_pairs: usize, variant: BoundVariant) -> Result<(f64, Value)> {
    let c = rng.random_range(2..=5);
    let d = rng.random_range(2..=8);
    let z = gaussian_vec(d, rng);
    let w = gaussian_matrix(c, d, rng);
    let b = gaussian_vec(c, rng);
    let cov = random_psd(d, rng);
    let lambda = match variant {
        BoundVariant::LambdaZero => 0.0,
        // (0, 5]
        _ => 5.0 * (1.0 - rng.random::<f64>()),
    };
    let bound_lambda = match variant {
        BoundVariant::HalvedLambda => lambda / 2.0,
        _ => lambda,
    };
    let mc = efa_mc_estimate(&z, &cov, &w, &b, lambda, n_pairs, rng)?;
    let bound = match variant {
        BoundVariant::FlippedCurvature => flipped_curvature_bound(&z, &cov, &w, &b, lambda)?,
        _ => ifa_loss(&z, &cov, &w, &b, bound_lambda)?.value,
    };
    let slack = bound + BOUND_STDERRS * mc.stderr - mc.mean;
    let instance = json!({
        "classes": c,
        "dim": d,
        "feature": z,
        "weights": rows(&w),
        "bias": b,
        "covariance": rows(&cov),
        "lambda": lambda,
        "bound_lambda": bound_lambda,
        "bound": bound,
        "mc_mean": mc.mean,
        "mc_stderr": mc.stderr,
        "n_pairs": n_pairs,
    });
    Ok((slack, instance))
}

fn flipped_curvature_bound(z: &[f64], cov: &Matrix, w: &Matrix, b: &[f64], lambda: f64) -> Result<f64> {
    let c = w.rows();
    let logits: Vec<f64> = (0..c).map(|k| b[k] + dot(w.row(k), z)).collect();
    let mut total = 0.0;
    for k in 0..c {
        let shifted = (0..c)
            .map(|j| {
                let u: Vec<f64> = w.row(j).iter().zip(w.row(k)).map(|(a, bb)| a - bb).collect();
                Ok(logits[j] - 0.5 * lambda * dot(&u, &cov.matvec(&u)?))
            })
            .collect::<Result<Vec<f64>>>()?;
        total += -2.0 * (logits[k] - logsumexp(&shifted)?);
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// SNC as a matrix factorisation

/// The three evaluations that must agree on a symmetric K-regular graph.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FactorizationSides {
    /// `Σ_i SNC(p_i)` with decay 1 and the whole set as batch.
    pub snc_sum: f64,
    /// `-(2/K) Σ_{edges} p_iᵀp_j + Σ_{i,k} (p_iᵀp_k)²`
    pub edge_form: f64,
    /// `‖Â - PPᵀ‖² - ‖Â‖²` with `Â = A / degree`.
    pub matrix_form: f64,
}

impl FactorizationSides {
    pub fn max_gap(&self) -> f64 {
        (self.snc_sum - self.edge_form)
            .abs()
            .max((self.edge_form - self.matrix_form).abs())
    }
}

/// KNN lists of every row under cosine distance, or `None` when the directed
/// graph is not symmetric.
pub fn symmetric_knn_graph(features: &Matrix, k: usize) -> Result<Option<Vec<Vec<usize>>>> {
    let n = features.rows();
    let uniform = Matrix::new(n, 1, vec![1.0; n])?;
    let (fbank, _) = banks_from_rows(features, &uniform)?;
    let lists = (0..n)
        .map(|i| fbank.knn(i, k).map(|s| s.indices))
        .collect::<Result<Vec<_>>>()?;
    let symmetric = lists
        .iter()
        .enumerate()
        .all(|(i, l)| l.iter().all(|&j| lists[j].contains(&i)));
    Ok(symmetric.then_some(lists))
}

pub fn factorization_sides(probs: &Matrix, neighbors: &[Vec<usize>], k: usize) -> Result<FactorizationSides> {
    factorization_sides_with_degree(probs, neighbors, k, k as f64)
}

fn factorization_sides_with_degree(
    probs: &Matrix,
    neighbors: &[Vec<usize>],
    k: usize,
    degree: f64,
) -> Result<FactorizationSides> {
    let n = probs.rows();
    if neighbors.len() != n || neighbors.iter().any(|l| l.len() != k) {
        return invalid("every row needs exactly K neighbours");
    }
    let mut snc_sum = 0.0;
    for (i, l) in neighbors.iter().enumerate() {
        snc_sum += snc_loss(probs.row(i), &probs.select_rows(l), probs, 1.0)?.value;
    }

    let mut attract = 0.0;
    for (i, l) in neighbors.iter().enumerate() {
        for &j in l {
            attract += dot(probs.row(i), probs.row(j));
        }
    }
    let gram = probs.matmul(&probs.transpose())?;
    let dispersion: f64 = gram.as_slice().iter().map(|g| g * g).sum();
    let edge_form = -2.0 / k as f64 * attract + dispersion;

    let mut a_hat = Matrix::zeros(n, n);
    for (i, l) in neighbors.iter().enumerate() {
        for &j in l {
            a_hat.set(i, j, 1.0 / degree);
        }
    }
    let diff_sq: f64 = a_hat
        .as_slice()
        .iter()
        .zip(gram.as_slice())
        .map(|(a, g)| (a - g) * (a - g))
        .sum();
    let a_sq: f64 = a_hat.as_slice().iter().map(|a| a * a).sum();
    Ok(FactorizationSides {
        snc_sum,
        edge_form,
        matrix_form: diff_sq - a_sq,
    })
}

/// Features with a planted K-regular symmetric neighbourhood structure:
/// complete blocks of `K + 1` points and "prism" blocks of `2K` points (two
/// parallel copies of a K-point cluster, one rung per pair). Blocks sit on
/// orthogonal axes so cross-block cosine distances are near 1.
pub fn planted_features(n: usize, k: usize, rng: &mut SeededRng) -> Result<Matrix> {
    if k == 0 {
        return invalid("K must be at least 1");
    }
    let options: Vec<usize> = (0..=n / (2 * k))
        .filter(|p| (n - 2 * k * p) % (k + 1) == 0 && (k > 1 || *p == 0))
        .collect();
    let Some(&prisms) = options.get(rng.random_range(0..options.len().max(1))) else {
        return invalid(format!("{n} points cannot be split into blocks of {} or {}", k + 1, 2 * k));
    };
    let completes = (n - 2 * k * prisms) / (k + 1);
    let blocks = prisms + completes;
    let extra = k + 1;
    let dim = blocks + extra;
    let eps = 0.01;
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(n);
    let point = |block: usize, offset: &[f64]| {
        let mut v = vec![0.0; dim];
        v[block] = 1.0;
        v[blocks..].copy_from_slice(offset);
        v
    };
    for block in 0..blocks {
        if block < prisms {
            let level: Vec<Vec<f64>> = (0..k)
                .map(|_| {
                    let mut o: Vec<f64> = gaussian_vec(extra, rng).iter().map(|v| eps * v).collect();
                    o[extra - 1] = 0.0;
                    o
                })
                .collect();
            let mut diameter: f64 = 0.0;
            for a in &level {
                for b in &level {
                    let gap: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
                    diameter = diameter.max(norm(&gap));
                }
            }
            let rung = 2.0 * diameter.max(eps);
            for o in &level {
                out.push(point(block, o));
                let mut top = o.clone();
                top[extra - 1] = rung;
                out.push(point(block, &top));
            }
        } else {
            for _ in 0..=k {
                let o: Vec<f64> = gaussian_vec(extra, rng).iter().map(|v| eps * v).collect();
                out.push(point(block, &o));
            }
        }
    }
    out.shuffle(rng);
    Matrix::from_rows(&out)
}

/// Full-batch SNC against its edge and matrix-factorisation forms on planted
/// symmetric KNN graphs, one trial per split of `seed`.
pub fn verify_snc_factorization(n_points: usize, k: usize, trials: usize, seed: u64) -> Result<VerifyReport> {
    verify_snc_factorization_with(n_points, k, trials, seed, false)
}

/// With `negative_control`, the matrix form normalises by `K + 1` instead of
/// the degree `K`.
pub fn verify_snc_factorization_with(
    n_points: usize,
    k: usize,
    trials: usize,
    seed: u64,
    negative_control: bool,
) -> Result<VerifyReport> {
    if trials == 0 {
        return invalid("need at least one trial");
    }
    if k == 0 || n_points <= k {
        return invalid("need 1 <= K < n_points");
    }
    let root = SeededRng::new(seed);
    let degree = if negative_control { (k + 1) as f64 } else { k as f64 };
    let mut report = VerifyReport::new("snc-factorization", negative_control, WorstKind::MaxError);
    for t in 0..trials {
        let mut rng = root.split(t as u64);
        let mut found = None;
        for _ in 0..SYMMETRIC_RESAMPLES {
            let features = planted_features(n_points, k, &mut rng)?;
            if let Some(graph) = symmetric_knn_graph(&features, k)? {
                found = Some((features, graph));
                break;
            }
        }
        let Some((features, graph)) = found else {
            report.record(
                t,
                0.0,
                Some((
                    format!("inconclusive: no symmetric KNN graph in {SYMMETRIC_RESAMPLES} draws"),
                    json!({ "n_points": n_points, "k": k }),
                )),
            );
            continue;
        };
        let classes = rng.random_range(2..=5);
        let probs = random_distributions(n_points, classes, 2.0, &mut rng);
        let sides = factorization_sides_with_degree(&probs, &graph, k, degree)?;
        let gap = sides.max_gap();
        let failure = (gap > FACTORIZATION_TOL).then(|| {
            (
                format!("forms disagree by {gap:.3e}"),
                json!({
                    "k": k,
                    "degree": degree,
                    "features": rows(&features),
                    "probs": rows(&probs),
                    "neighbors": graph,
                    "sides": sides,
                }),
            )
        });
        report.record(t, gap, failure);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradients

struct GradientInstance {
    model: Model,
    inputs: Matrix,
    neighbor_probs: Vec<Matrix>,
    batch_probs: Matrix,
    pseudo_labels: Vec<usize>,
    covariances: Vec<Matrix>,
    affinity: AffinityWeights,
    weights: LossWeights,
    hidden: Vec<usize>,
}

impl GradientInstance {
    fn random(rng: &mut SeededRng) -> Result<Self> {
        let input_dim = rng.random_range(2..=4);
        let d = rng.random_range(2..=8);
        let c = rng.random_range(2..=5);
        let hidden = if rng.random_bool(0.5) {
            vec![rng.random_range(4..=8)]
        } else {
            Vec::new()
        };
        let batch = rng.random_range(4..=8);
        let k = rng.random_range(1..=3);
        let arch = Architecture {
            hidden: hidden.clone(),
            feature_dim: d,
            feature_activation: Activation::Relu,
        };
        // Keep every ReLU input well away from its kink so central
        // differences see a smooth function.
        let (model, inputs) = loop {
            let model = Model::random(&arch, input_dim, c, rng)?;
            let inputs = gaussian_matrix(batch, input_dim, rng);
            let pass = model.forward(&inputs)?;
            if pass.relu_margin(&model) > 1e-2 && pass.features.as_slice().iter().any(|&v| v > 0.0) {
                break (model, inputs);
            }
        };
        let neighbor_probs = (0..batch).map(|_| random_distributions(k, c, 1.5, rng)).collect();
        let batch_probs = random_distributions(batch, c, 1.5, rng);
        // At least one class with two rows so FD is not degenerate.
        let groups = c.min(batch / 2);
        let mut pseudo_labels: Vec<usize> = (0..batch).map(|r| r % groups).collect();
        pseudo_labels.shuffle(rng);
        let covariances = (0..c).map(|_| random_psd(d, rng)).collect();
        let means = random_distributions(c, c, 1.5, rng);
        let affinity = AffinityWeights::from_matrix(means.matmul(&means.transpose())?)?;
        let weights = LossWeights {
            alpha1: rng.random_range(0.1..1.0),
            alpha2: rng.random_range(0.1..10.0),
            decay: 1.0 - rng.random::<f64>(),
            lambda: rng.random_range(0.0..5.0),
        };
        Ok(Self {
            model,
            inputs,
            neighbor_probs,
            batch_probs,
            pseudo_labels,
            covariances,
            affinity,
            weights,
            hidden,
        })
    }

    fn targets(&self) -> StepTargets<'_> {
        StepTargets {
            neighbor_probs: &self.neighbor_probs,
            batch_probs: &self.batch_probs,
            pseudo_labels: &self.pseudo_labels,
            covariances: &self.covariances,
            affinity: &self.affinity,
        }
    }

    fn to_json(&self) -> Value {
        json!({
            "hidden": self.hidden,
            "feature_dim": self.model.feature_dim(),
            "classes": self.model.classes(),
            "params": self.model.param_slices(),
            "inputs": rows(&self.inputs),
            "neighbor_probs": self.neighbor_probs.iter().map(rows).collect::<Vec<_>>(),
            "batch_probs": rows(&self.batch_probs),
            "pseudo_labels": self.pseudo_labels,
            "covariances": self.covariances.iter().map(rows).collect::<Vec<_>>(),
            "affinity": rows(&self.affinity.matrix),
            "weights": {
                "alpha1": self.weights.alpha1,
                "alpha2": self.weights.alpha2,
                "decay": self.weights.decay,
                "lambda": self.weights.lambda,
            },
        })
    }
}

/// Tiny fixed model with every parameter in `[0.5, 4]`, for the loss-free
/// controls; parameters far from zero keep the relative metric meaningful.
fn control_model() -> Model {
    let mut m = Model::new(
        vec![DenseLayer {
            weights: Matrix::zeros(2, 2),
            bias: vec![0.0; 2],
            activation: Activation::Identity,
        }],
        Matrix::zeros(2, 2),
        vec![0.0; 2],
    )
    .expect("valid shapes");
    let mut v = 0.5;
    for s in m.param_slices_mut() {
        for p in s {
            *p = v;
            v += 0.25;
        }
    }
    m
}

fn quadratic(model: &Model) -> Result<(f64, GradientSet)> {
    let mut g = GradientSet::zeros_like(model);
    let mut value = 0.0;
    for (gs, ps) in g.slices_mut().into_iter().zip(model.param_slices()) {
        for (gv, &p) in gs.iter_mut().zip(ps) {
            value += 0.5 * p * p;
            *gv = p;
        }
    }
    Ok((value, g))
}

/// Central differences against the analytic gradients of each objective term
/// and of the composite, on `instances` random toy problems, plus constant
/// and quadratic controls.
pub fn verify_gradients(instances: usize, seed: u64) -> Result<VerifyReport> {
    verify_gradients_with(instances, seed, false)
}

/// With `negative_control`, the composite's analytic gradient is scaled by
/// `1 + 1e-3` before comparison.
pub fn verify_gradients_with(instances: usize, seed: u64, negative_control: bool) -> Result<VerifyReport> {
    if instances == 0 {
        return invalid("need at least one instance");
    }
    let mut report = VerifyReport::new("gradients", negative_control, WorstKind::MaxError);
    let control = control_model();
    let constant = finite_diff_check(&control, |m| Ok((3.0, GradientSet::zeros_like(m))), GRADIENT_STEP)?;
    report.record(
        0,
        constant.max_rel_error,
        (constant.max_rel_error != 0.0).then(|| {
            ("constant control has nonzero error".to_string(), json!(constant))
        }),
    );
    let quad = finite_diff_check(&control, quadratic, GRADIENT_STEP)?;
    report.record(
        1,
        quad.max_rel_error,
        (quad.max_rel_error >= 1e-9).then(|| ("quadratic control error >= 1e-9".to_string(), json!(quad))),
    );

    let root = SeededRng::new(seed);
    let scale = if negative_control { 1.0 + 1e-3 } else { 1.0 };
    let outcomes = (0..instances)
        .into_par_iter()
        .map(|t| -> Result<Vec<(String, f64, Value)>> {
            let inst = GradientInstance::random(&mut root.split(t as u64))?;
            let targets = inst.targets();
            let mut checks = Vec::new();
            for (name, term) in [("snc", Term::Snc), ("ifa", Term::Ifa), ("fd", Term::Fd)] {
                let r = finite_diff_check(
                    &inst.model,
                    |m| term_objective(m, &m.forward(&inst.inputs)?, &targets, &inst.weights, term),
                    GRADIENT_STEP,
                )?;
                checks.push((name.to_string(), r.max_rel_error, json!(r)));
            }
            let r = finite_diff_check(
                &inst.model,
                |m| {
                    let out = step_objective(m, &m.forward(&inst.inputs)?, &targets, &inst.weights)?;
                    let mut g = out.grads;
                    g.scale(scale);
                    Ok((out.breakdown.total, g))
                },
                GRADIENT_STEP,
            )?;
            checks.push(("composite".to_string(), r.max_rel_error, json!(r)));
            let instance = inst.to_json();
            Ok(checks
                .into_iter()
                .map(|(n, e, r)| (n, e, json!({ "check": r, "instance": instance })))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    for (t, checks) in outcomes.into_iter().enumerate() {
        let worst = checks.iter().map(|c| c.1).fold(0.0, f64::max);
        let failure = checks
            .into_iter()
            .filter(|c| !(c.1 < GRADIENT_TOL))
            .map(|(name, err, detail)| (format!("{name}: relative error {err:.3e}"), detail))
            .reduce(|a, b| (format!("{}; {}", a.0, b.0), a.1));
        report.record(t + 2, worst, failure);
    }
    Ok(report)
}

// ---------------------------------------------------------------------------
// Estimator oracles

/// Streaming class statistics against the two-pass oracle. Stream 0 uses
/// size-1 batches only, stream 1 a single batch, the rest random sizes with
/// frequent singletons.
pub fn verify_streaming_stats(
    streams: usize,
    samples: usize,
    classes: usize,
    dim: usize,
    seed: u64,
    negative_control: bool,
) -> Result<VerifyReport> {
    if classes == 0 || dim == 0 || samples == 0 {
        return invalid("streams need samples, classes and dimensions");
    }
    let root = SeededRng::new(seed);
    let mut report = VerifyReport::new("streaming-stats", negative_control, WorstKind::MaxError);
    for s in 0..streams {
        let mut rng = root.split(s as u64);
        let centers: Vec<Vec<f64>> = (0..classes)
            .map(|_| gaussian_vec(dim, &mut rng).iter().map(|v| 3.0 * v).collect())
            .collect();
        let labels: Vec<usize> = (0..samples).map(|_| rng.random_range(0..classes)).collect();
        let spread: Vec<f64> = (0..classes).map(|_| rng.random_range(0.2..2.0)).collect();
        let features = Matrix::from_rows(
            &labels
                .iter()
                .map(|&y| {
                    gaussian_vec(dim, &mut rng)
                        .iter()
                        .zip(&centers[y])
                        .map(|(g, c)| c + spread[y] * g)
                        .collect::<Vec<_>>()
                })
                .collect::<Vec<_>>(),
        )?;
        let mut sizes = Vec::new();
        let mut left = samples;
        while left > 0 {
            let m = match s {
                0 => 1,
                1 => left,
                _ if rng.random_bool(0.3) => 1,
                _ => rng.random_range(2..=64),
            }
            .min(left);
            sizes.push(m);
            left -= m;
        }
        let mut stats = ClassStatistics::new(classes, dim);
        let mut start = 0;
        for &m in &sizes {
            let idx: Vec<usize> = (start..start + m).collect();
            stats.update(&features.select_rows(&idx), &labels[start..start + m])?;
            start += m;
        }
        let mut err: f64 = 0.0;
        let mut worst_class = 0;
        for c in 0..classes {
            let idx: Vec<usize> = (0..samples).filter(|&i| labels[i] == c).collect();
            if idx.is_empty() {
                continue;
            }
            let (mean, mut cov) = batch_covariance_oracle(&features.select_rows(&idx))?;
            if negative_control && idx.len() > 1 {
                cov.scale(idx.len() as f64 / (idx.len() - 1) as f64);
            }
            let e = cov.max_abs_diff(stats.covariance(c)).max(
                mean.iter()
                    .zip(stats.mean(c))
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max),
            );
            let e = if stats.count(c) != idx.len() as u64 { f64::INFINITY } else { e };
            if e > err {
                err = e;
                worst_class = c;
            }
        }
        let failure = (!(err < STATS_TOL)).then(|| {
            (
                format!("class {worst_class} differs from the oracle by {err:.3e}"),
                json!({
                    "features": rows(&features),
                    "labels": labels,
                    "batch_sizes": sizes,
                }),
            )
        });
        report.record(s, err, failure);
    }
    Ok(report)
}

/// Exhaustive scan: all other rows sorted by (cosine distance, index).
fn knn_oracle(features: &Matrix, query: usize, k: usize) -> Vec<usize> {
    let unit = |r: &[f64]| -> Vec<f64> {
        let n = norm(r);
        r.iter().map(|v| if n > 0.0 { v / n } else { 0.0 }).collect()
    };
    let q = unit(features.row(query));
    let mut all: Vec<(f64, usize)> = (0..features.rows())
        .filter(|&j| j != query)
        .map(|j| (1.0 - dot(&q, &unit(features.row(j))), j))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|p| p.1).collect()
}

/// Euclidean ranking of raw rows; disagrees with the cosine KNN whenever
/// norms vary.
fn euclidean_oracle(features: &Matrix, query: usize, k: usize) -> Vec<usize> {
    let q = features.row(query);
    let mut all: Vec<(f64, usize)> = (0..features.rows())
        .filter(|&j| j != query)
        .map(|j| {
            let d: f64 = q.iter().zip(features.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            (d, j)
        })
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    all.into_iter().take(k).map(|p| p.1).collect()
}

/// Bank KNN against an exhaustive scan. The bank holds Gaussian rows with
/// ten exact duplicates (ties) and one zero row.
pub fn verify_knn(points: usize, dim: usize, queries: usize, ks: &[usize], seed: u64, negative_control: bool) -> Result<VerifyReport> {
    if points < 22 || dim == 0 {
        return invalid("KNN check needs at least 22 points");
    }
    let mut rng = SeededRng::new(seed);
    let mut features = gaussian_matrix(points, dim, &mut rng);
    for i in 0..10 {
        let src = features.row(2 * i).to_vec();
        features.row_mut(2 * i + 1).copy_from_slice(&src);
    }
    features.row_mut(points - 1).iter_mut().for_each(|v| *v = 0.0);
    let uniform = Matrix::new(points, 1, vec![1.0; points])?;
    let (bank, _) = banks_from_rows(&features, &uniform)?;
    let mut qs: Vec<usize> = vec![0, 1, points - 1];
    while qs.len() < queries {
        let q = rng.random_range(0..points);
        if !qs.contains(&q) {
            qs.push(q);
        }
    }
    qs.truncate(queries);
    let mut report = VerifyReport::new("knn", negative_control, WorstKind::MaxError);
    let mut trial = 0;
    for &k in ks {
        for &q in &qs {
            let got = bank.knn(q, k)?.indices;
            let want = if negative_control {
                euclidean_oracle(&features, q, k)
            } else {
                knn_oracle(&features, q, k)
            };
            let mismatches = got.iter().zip(&want).filter(|(a, b)| a != b).count();
            let failure = (mismatches > 0).then(|| {
                (
                    format!("query {q}, K = {k}: {mismatches} positions differ"),
                    json!({ "query": q, "k": k, "bank": got, "oracle": want, "seed": seed }),
                )
            });
            report.record(trial, mismatches as f64, failure);
            trial += 1;
        }
    }
    Ok(report)
}

/// `l_c - logsumexp(l) = log softmax(l)_c` on random logit vectors with large
/// common offsets.
pub fn verify_softmax(vectors: usize, seed: u64) -> Result<VerifyReport> {
    let mut rng = SeededRng::new(seed);
    let mut report = VerifyReport::new("softmax", false, WorstKind::MaxError);
    for t in 0..vectors {
        let c = rng.random_range(2..=10);
        let offset = rng.random_range(-500.0..500.0);
        let logits: Vec<f64> = (0..c).map(|_| offset + rng.random_range(-30.0..30.0)).collect();
        let lse = logsumexp(&logits)?;
        let p = softmax(&logits)?;
        let err = logits
            .iter()
            .zip(&p)
            .map(|(l, pc)| (l - lse - pc.ln()).abs())
            .fold((p.iter().sum::<f64>() - 1.0).abs(), f64::max);
        let failure = (!(err <= SOFTMAX_TOL)).then(|| (format!("inconsistency {err:.3e}"), json!({ "logits": logits })));
        report.record(t, err, failure);
    }
    Ok(report)
}

/// Streaming statistics, KNN and softmax oracles at their acceptance sizes.
pub fn verify_oracles(seed: u64) -> Result<VerifyReport> {
    verify_oracles_with(seed, false)
}

/// With `negative_control`, the covariance oracle uses sample (`m - 1`)
/// normalisation and the KNN oracle ranks by Euclidean distance.
pub fn verify_oracles_with(seed: u64, negative_control: bool) -> Result<VerifyReport> {
    let root = SeededRng::new(seed);
    let sections = vec![
        verify_streaming_stats(10, 1000, 10, 8, root.split(0).seed(), negative_control)?,
        verify_knn(500, 16, 50, &[1, 5, 10], root.split(1).seed(), negative_control)?,
        verify_softmax(200, root.split(2).seed())?,
    ];
    Ok(VerifyReport::combine("oracles", sections))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_mutual_points_cancel() {
        let probs = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0]]).unwrap();
        let s = factorization_sides(&probs, &[vec![1], vec![0]], 1).unwrap();
        assert_eq!((s.snc_sum, s.edge_form, s.matrix_form), (0.0, 0.0, 0.0));
    }

    #[test]
    fn two_orthogonal_pairs_cancel() {
        let probs = Matrix::from_rows(&[[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let graph = [vec![1], vec![0], vec![3], vec![2]];
        let s = factorization_sides(&probs, &graph, 1).unwrap();
        assert_eq!((s.snc_sum, s.edge_form, s.matrix_form), (0.0, 0.0, 0.0));
    }

    #[test]
    fn planted_graphs_are_symmetric_and_regular() {
        for seed in 0..10 {
            let mut rng = SeededRng::new(seed);
            let f = planted_features(30, 3, &mut rng).unwrap();
            let g = symmetric_knn_graph(&f, 3).unwrap().expect("planted graph is symmetric");
            assert!(g.iter().all(|l| l.len() == 3));
        }
        assert!(planted_features(7, 3, &mut SeededRng::new(0)).is_err());
    }

    #[test]
    fn factorization_suite_and_control() {
        let ok = verify_snc_factorization(30, 3, 10, 1).unwrap();
        assert!(ok.passed, "{:?}", ok.failures.first().map(|f| &f.reason));
        assert!(ok.worst < FACTORIZATION_TOL);
        let bad = verify_snc_factorization_with(30, 3, 10, 1, true).unwrap();
        assert_eq!(bad.failures.len(), 10);
    }

    #[test]
    fn lambda_zero_gap_matches_closed_form() {
        let r = verify_ifa_bound_with(4, 10_000, 3, BoundVariant::LambdaZero).unwrap();
        assert!(r.passed);
        for t in 0..4 {
            let (slack, inst) = ifa_bound_trial(&mut SeededRng::new(3).split(t), 10_000, BoundVariant::LambdaZero).unwrap();
            assert_eq!(inst["mc_stderr"], 0.0);
            let z: Vec<f64> = serde_json::from_value(inst["feature"].clone()).unwrap();
            let w: Vec<Vec<f64>> = serde_json::from_value(inst["weights"].clone()).unwrap();
            let b: Vec<f64> = serde_json::from_value(inst["bias"].clone()).unwrap();
            let logits: Vec<f64> = w.iter().zip(&b).map(|(row, bc)| bc + dot(row, &z)).collect();
            let p = softmax(&logits).unwrap();
            let gap = -2.0 * p.iter().map(|v| v.ln()).sum::<f64>() + p.iter().map(|v| v * v).sum::<f64>().ln();
            assert!((slack - gap).abs() < 1e-9 * gap.max(1.0), "{slack} vs {gap}");
        }
    }

    #[test]
    fn flipped_curvature_control_fails() {
        let r = verify_ifa_bound_with(20, 10_000, 7, BoundVariant::FlippedCurvature).unwrap();
        assert!(r.negative_control);
        assert!(!r.passed && r.worst < 0.0);
        assert!(r.failures[0].instance["bound"].is_number());
    }

    #[test]
    fn halved_lambda_is_absorbed_by_class_sum_margin() {
        let r = verify_ifa_bound_with(20, 10_000, 7, BoundVariant::HalvedLambda).unwrap();
        assert!(r.passed && r.worst > 0.0);
    }

    #[test]
    fn bound_rejects_bad_sizes() {
        assert!(verify_ifa_bound(0, 10_000, 0).is_err());
        assert!(verify_ifa_bound(1, 9_999, 0).is_err());
    }

    #[test]
    fn gradient_suite_and_control() {
        let ok = verify_gradients(5, 11).unwrap();
        assert!(ok.passed, "{:?}", ok.failures.first().map(|f| &f.reason));
        assert!(ok.worst < GRADIENT_TOL);
        let bad = verify_gradients_with(5, 11, true).unwrap();
        assert_eq!(bad.failures.len(), 5);
    }

    #[test]
    fn oracle_suite_and_control() {
        let ok = verify_oracles(5).unwrap();
        assert!(ok.passed, "{:?}", ok.failures.first().map(|f| &f.reason));
        assert_eq!(ok.sections.len(), 3);
        let bad = verify_oracles_with(5, true).unwrap();
        assert!(bad.sections[0].failures.len() == 10);
        assert!(!bad.sections[1].failures.is_empty());
    }

    #[test]
    fn one_batch_stream_matches_exactly() {
        let r = verify_streaming_stats(2, 300, 4, 3, 9, false).unwrap();
        assert!(r.passed);
    }

    #[test]
    fn reports_are_reproducible() {
        let a = serde_json::to_string(&verify_oracles(2).unwrap()).unwrap();
        let b = serde_json::to_string(&verify_oracles(2).unwrap()).unwrap();
        assert_eq!(a, b);
    }
}
