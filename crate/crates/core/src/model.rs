//! Feature extractor `f` (a small MLP) and linear classifier `g`, with
//! exact reverse-mode gradients, momentum SGD and a finite-difference checker.
//!
//! Features are `z = f(x)`, logits are `g(z) = W z + b` with `W` stored as a
//! `C x d` matrix whose rows are the class weight vectors `w_c`, and
//! predictions are `softmax(g(z))`.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::{softmax_in_place, Matrix, SeededRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    #[inline]
    fn derivative(self, pre: f64) -> f64 {
        match self {
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `out x in`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weights.rows()
    }
}

/// Layer widths used to build a fresh model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    #[serde(default = "Architecture::default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "Architecture::default_feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "Architecture::default_feature_activation")]
    pub feature_activation: Activation,
}

impl Architecture {
    fn default_hidden() -> Vec<usize> {
        Vec::new()
    }
    fn default_feature_dim() -> usize {
        8
    }
    fn default_feature_activation() -> Activation {
        Activation::Relu
    }
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            hidden: Self::default_hidden(),
            feature_dim: Self::default_feature_dim(),
            feature_activation: Self::default_feature_activation(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<DenseLayer>,
    classifier_weights: Matrix,
    classifier_bias: Vec<f64>,
}

impl Model {
    pub fn new(
        layers: Vec<DenseLayer>,
        classifier_weights: Matrix,
        classifier_bias: Vec<f64>,
    ) -> Result<Self> {
        if layers.is_empty() {
            return invalid("feature extractor needs at least one layer");
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.out_dim() {
                return invalid(format!(
                    "layer {i}: bias length {} != output width {}",
                    layer.bias.len(),
                    layer.out_dim()
                ));
            }
            if i > 0 && layers[i - 1].out_dim() != layer.in_dim() {
                return invalid(format!(
                    "layer {i}: input width {} does not chain with previous output {}",
                    layer.in_dim(),
                    layers[i - 1].out_dim()
                ));
            }
            if !layer.weights.is_finite() || layer.bias.iter().any(|v| !v.is_finite()) {
                return invalid(format!("layer {i}: non-finite parameters"));
            }
        }
        let d = layers.last().map(DenseLayer::out_dim).unwrap_or(0);
        if classifier_weights.cols() != d {
            return invalid(format!(
                "classifier input width {} != feature dimension {d}",
                classifier_weights.cols()
            ));
        }
        if classifier_weights.rows() < 1 || classifier_bias.len() != classifier_weights.rows() {
            return invalid("classifier bias length must equal class count (>= 1)");
        }
        if !classifier_weights.is_finite() || classifier_bias.iter().any(|v| !v.is_finite()) {
            return invalid("classifier has non-finite parameters");
        }
        Ok(Self {
            layers,
            classifier_weights,
            classifier_bias,
        })
    }

    /// He-initialised weights (ReLU layers), zero biases.
    pub fn random(
        arch: &Architecture,
        input_dim: usize,
        classes: usize,
        rng: &mut SeededRng,
    ) -> Result<Self> {
        if input_dim == 0 || classes == 0 || arch.feature_dim == 0 || arch.hidden.contains(&0) {
            return invalid("all model widths must be positive");
        }
        let mut widths = vec![input_dim];
        widths.extend(&arch.hidden);
        widths.push(arch.feature_dim);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let activation = if i + 2 == widths.len() {
                arch.feature_activation
            } else {
                Activation::Relu
            };
            let gain = if activation == Activation::Relu { 2.0 } else { 1.0 };
            layers.push(DenseLayer {
                weights: gaussian_matrix(pair[1], pair[0], (gain / pair[0] as f64).sqrt(), rng),
                bias: vec![0.0; pair[1]],
                activation,
            });
        }
        let w = gaussian_matrix(classes, arch.feature_dim, (1.0 / arch.feature_dim as f64).sqrt(), rng);
        Self::new(layers, w, vec![0.0; classes])
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier_weights.cols()
    }

    pub fn classes(&self) -> usize {
        self.classifier_weights.rows()
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn classifier_weights(&self) -> &Matrix {
        &self.classifier_weights
    }

    pub fn classifier_bias(&self) -> &[f64] {
        &self.classifier_bias
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameter arrays in canonical order: per layer weights then bias,
    /// then classifier weights and bias.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.classifier_weights.as_slice());
        out.push(self.classifier_bias.as_slice());
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.classifier_weights.as_mut_slice());
        out.push(self.classifier_bias.as_mut_slice());
        out
    }

    pub fn forward(&self, inputs: &Matrix) -> Result<ForwardPass> {
        if inputs.cols() != self.input_dim() {
            return invalid(format!(
                "input width {} does not match model input {}",
                inputs.cols(),
                self.input_dim()
            ));
        }
        let mut layer_inputs = Vec::with_capacity(self.layers.len());
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut current = inputs.clone();
        for layer in &self.layers {
            let pre = affine(&current, &layer.weights, &layer.bias);
            let mut post = pre.clone();
            post.as_mut_slice()
                .iter_mut()
                .for_each(|v| *v = layer.activation.apply(*v));
            layer_inputs.push(current);
            pre_activations.push(pre);
            current = post;
        }
        let features = current;
        let logits = affine(&features, &self.classifier_weights, &self.classifier_bias);
        let mut probs = logits.clone();
        for r in 0..probs.rows() {
            softmax_in_place(probs.row_mut(r));
        }
        Ok(ForwardPass {
            features,
            logits,
            probs,
            layer_inputs,
            pre_activations,
        })
    }

    /// Exact parameter gradients given upstream sensitivities at the logits
    /// and directly at the features.
    pub fn grad_params(
        &self,
        inputs: &Matrix,
        dl_dlogits: &Matrix,
        dl_dfeatures: &Matrix,
    ) -> Result<GradientSet> {
        let pass = self.forward(inputs)?;
        self.backward(&pass, dl_dlogits, dl_dfeatures)
    }

    /// Same as [`Model::grad_params`] but reuses a cached forward pass.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        dl_dlogits: &Matrix,
        dl_dfeatures: &Matrix,
    ) -> Result<GradientSet> {
        let b = pass.features.rows();
        if dl_dlogits.shape() != (b, self.classes()) {
            return invalid(format!(
                "logit gradient shape {:?} != {:?}",
                dl_dlogits.shape(),
                (b, self.classes())
            ));
        }
        if dl_dfeatures.shape() != (b, self.feature_dim()) {
            return invalid(format!(
                "feature gradient shape {:?} != {:?}",
                dl_dfeatures.shape(),
                (b, self.feature_dim())
            ));
        }
        let mut grads = GradientSet::zeros_like(self);
        // classifier: dW = dLᵀ Z, db = Σ_rows dL
        let (gw, gb) = (&mut grads.classifier_weights, &mut grads.classifier_bias);
        for r in 0..b {
            let dl = dl_dlogits.row(r);
            let z = pass.features.row(r);
            for (c, &g) in dl.iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[c] += g;
                let row = gw.row_mut(c);
                for (w, &zi) in row.iter_mut().zip(z) {
                    *w += g * zi;
                }
            }
        }
        // dZ = dL W + dF
        let mut upstream = dl_dlogits.matmul(&self.classifier_weights)?;
        for (u, &f) in upstream.as_mut_slice().iter_mut().zip(dl_dfeatures.as_slice()) {
            *u += f;
        }
        for (li, layer) in self.layers.iter().enumerate().rev() {
            let pre = &pass.pre_activations[li];
            let input = &pass.layer_inputs[li];
            let mut dpre = upstream;
            for (g, &p) in dpre.as_mut_slice().iter_mut().zip(pre.as_slice()) {
                *g *= layer.activation.derivative(p);
            }
            let lg = &mut grads.layers[li];
            for r in 0..b {
                let g_row = dpre.row(r);
                let x_row = input.row(r);
                for (o, &g) in g_row.iter().enumerate() {
                    if g == 0.0 {
                        continue;
                    }
                    lg.bias[o] += g;
                    for (w, &x) in lg.weights.row_mut(o).iter_mut().zip(x_row) {
                        *w += g * x;
                    }
                }
            }
            upstream = if li > 0 {
                dpre.matmul(&layer.weights)?
            } else {
                Matrix::zeros(0, 0)
            };
        }
        Ok(grads)
    }
}

fn gaussian_matrix(rows: usize, cols: usize, std: f64, rng: &mut SeededRng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).expect("finite gaussian draws")
}

/// `X Wᵀ + 1 bᵀ`
fn affine(x: &Matrix, w: &Matrix, bias: &[f64]) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), w.rows());
    for r in 0..x.rows() {
        let xr = x.row(r);
        for (o, v) in out.row_mut(r).iter_mut().enumerate() {
            *v = bias[o] + crate::numerics::dot(w.row(o), xr);
        }
    }
    out
}

/// Activations of one forward pass, cached for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    pub features: Matrix,
    pub logits: Matrix,
    pub probs: Matrix,
    layer_inputs: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
}

impl ForwardPass {
    /// Smallest `|pre-activation|` feeding a ReLU; a finite-difference probe
    /// smaller than this cannot cross a kink.
    pub fn relu_margin(&self, model: &Model) -> f64 {
        model
            .layers
            .iter()
            .zip(&self.pre_activations)
            .filter(|(l, _)| l.activation == Activation::Relu)
            .flat_map(|(_, pre)| pre.as_slice().iter().map(|v| v.abs()))
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradient {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

/// One gradient array per model parameter array, same shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub layers: Vec<LayerGradient>,
    pub classifier_weights: Matrix,
    pub classifier_bias: Vec<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            layers: model
                .layers
                .iter()
                .map(|l| LayerGradient {
                    weights: Matrix::zeros(l.out_dim(), l.in_dim()),
                    bias: vec![0.0; l.out_dim()],
                })
                .collect(),
            classifier_weights: Matrix::zeros(model.classes(), model.feature_dim()),
            classifier_bias: vec![0.0; model.classes()],
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &self.layers {
            out.push(l.weights.as_slice());
            out.push(l.bias.as_slice());
        }
        out.push(self.classifier_weights.as_slice());
        out.push(self.classifier_bias.as_slice());
        out
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.layers.len() + 2);
        for l in &mut self.layers {
            out.push(l.weights.as_mut_slice());
            out.push(l.bias.as_mut_slice());
        }
        out.push(self.classifier_weights.as_mut_slice());
        out.push(self.classifier_bias.as_mut_slice());
        out
    }

    /// Flattened copy in canonical parameter order.
    pub fn to_flat(&self) -> Vec<f64> {
        self.slices().concat()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn scale(&mut self, s: f64) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn add_assign(&mut self, other: &GradientSet) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            debug_assert_eq!(a.len(), b.len());
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    fn congruent_with(&self, model: &Model) -> bool {
        let a = self.slices();
        let b = model.param_slices();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }
}

/// Momentum SGD state.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub lr: f64,
    pub buffers: GradientSet,
}

impl OptimizerState {
    pub fn new(model: &Model, lr: f64, momentum: f64) -> Self {
        Self {
            momentum,
            lr,
            buffers: GradientSet::zeros_like(model),
        }
    }
}

/// `buffer <- momentum * buffer + grad; param <- param - lr * buffer`.
///
/// A non-finite gradient refuses the step and leaves model and state untouched.
pub fn sgd_step(model: &mut Model, grads: &GradientSet, state: &mut OptimizerState) -> Result<()> {
    if !grads.congruent_with(model) || !state.buffers.congruent_with(model) {
        return invalid("gradient or optimizer buffers are not congruent with the model");
    }
    if !grads.is_finite() {
        return Err(Error::Numerical("non-finite gradient; step refused".into()));
    }
    let (mu, lr) = (state.momentum, state.lr);
    for ((param, buf), grad) in model
        .param_slices_mut()
        .into_iter()
        .zip(state.buffers.slices_mut())
        .zip(grads.slices())
    {
        for ((p, v), &g) in param.iter_mut().zip(buf.iter_mut()).zip(grad) {
            *v = mu * *v + g;
            *p -= lr * *v;
        }
    }
    Ok(())
}

/// Outcome of comparing analytic gradients with central differences.
#[derive(Debug, Clone, Serialize)]
pub struct FiniteDiffReport {
    pub max_rel_error: f64,
    /// Flat parameter index of the worst disagreement.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Max over parameters of `|analytic - numeric| / max(1e-8, |numeric|)`,
/// where `numeric` is the central difference with step `h`.
///
/// `loss` returns the objective value and its analytic gradient at a model.
pub fn finite_diff_check<F>(model: &Model, loss: F, h: f64) -> Result<FiniteDiffReport>
where
    F: Fn(&Model) -> Result<(f64, GradientSet)>,
{
    if !(h > 0.0) {
        return invalid("finite-difference step must be positive");
    }
    let (value, analytic) = loss(model)?;
    if !value.is_finite() {
        return Err(Error::Numerical("loss is not finite at the base point".into()));
    }
    if !analytic.congruent_with(model) {
        return invalid("analytic gradient not congruent with model");
    }
    let analytic = analytic.to_flat();
    let mut probe = model.clone();
    let mut report = FiniteDiffReport {
        max_rel_error: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    let mut flat = 0;
    let n_slices = model.param_slices().len();
    for s in 0..n_slices {
        let len = model.param_slices()[s].len();
        for k in 0..len {
            let orig = probe.param_slices()[s][k];
            probe.param_slices_mut()[s][k] = orig + h;
            let plus = loss(&probe)?.0;
            probe.param_slices_mut()[s][k] = orig - h;
            let minus = loss(&probe)?.0;
            probe.param_slices_mut()[s][k] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "loss not finite when perturbing parameter {flat}"
                )));
            }
            let numeric = (plus - minus) / (2.0 * h);
            let err = (analytic[flat] - numeric).abs() / numeric.abs().max(1e-8);
            if err > report.max_rel_error {
                report = FiniteDiffReport {
                    max_rel_error: err,
                    worst_index: flat,
                    analytic: analytic[flat],
                    numeric,
                };
            }
            flat += 1;
        }
    }
    Ok(report)
}
