//! Datasets, the synthetic rotated-mixture shift, CSV ingestion and
//! checkpoint persistence.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{invalid, Error, Result};
use crate::model::{Activation, DenseLayer, GradientSet, Model, OptimizerState};
use crate::numerics::{GaussianSampler, Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Matrix,
    pub labels: Option<Vec<usize>>,
    pub classes: usize,
}

/// Inputs without labels; the only form adaptation accepts.
#[derive(Debug, Clone, Copy)]
pub struct UnlabeledView<'a> {
    pub inputs: &'a Matrix,
    pub classes: usize,
}

impl Dataset {
    pub fn new(inputs: Matrix, labels: Option<Vec<usize>>, classes: usize) -> Result<Self> {
        if inputs.rows() == 0 {
            return invalid("dataset has no rows");
        }
        if let Some(labels) = &labels {
            if labels.len() != inputs.rows() {
                return invalid(format!("{} labels for {} rows", labels.len(), inputs.rows()));
            }
            if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
                return invalid(format!("label {bad} out of range (C = {classes})"));
            }
        }
        Ok(Self {
            inputs,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn unlabeled(&self) -> UnlabeledView<'_> {
        UnlabeledView {
            inputs: &self.inputs,
            classes: self.classes,
        }
    }

    pub fn class_counts(&self) -> Option<Vec<usize>> {
        self.labels.as_ref().map(|labels| {
            let mut counts = vec![0; self.classes];
            for &y in labels {
                counts[y] += 1;
            }
            counts
        })
    }
}

/// Gaussian mixture plus the transform that maps source to target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub classes: usize,
    pub means: Vec<Vec<f64>>,
    pub covariances: Vec<Vec<Vec<f64>>>,
    pub source_counts: Vec<usize>,
    pub target_counts: Vec<usize>,
    /// Rotation in the plane of the first two coordinates, in degrees.
    pub rotation_deg: f64,
    pub translation: Vec<f64>,
    /// Standard deviation of isotropic noise added to target inputs.
    pub noise: f64,
}

impl Default for ShiftSpec {
    /// Three unit-variance classes 120° apart on a radius-3 circle; target
    /// rotated by 45°.
    fn default() -> Self {
        let means = (0..3)
            .map(|c| {
                let t = (c as f64 * 120.0).to_radians();
                vec![3.0 * t.cos(), 3.0 * t.sin()]
            })
            .collect();
        Self {
            classes: 3,
            means,
            covariances: vec![vec![vec![1.0, 0.0], vec![0.0, 1.0]]; 3],
            source_counts: vec![200; 3],
            target_counts: vec![200; 3],
            rotation_deg: 45.0,
            translation: vec![0.0, 0.0],
            noise: 0.0,
        }
    }
}

impl ShiftSpec {
    pub fn dim(&self) -> usize {
        self.means.first().map_or(0, Vec::len)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.classes;
        if c < 2 {
            return invalid("classes: need at least 2");
        }
        let d = self.dim();
        if d == 0 {
            return invalid("means: dimension must be positive");
        }
        if self.means.len() != c || self.means.iter().any(|m| m.len() != d) {
            return invalid(format!("means: expected {c} vectors of length {d}"));
        }
        if self.covariances.len() != c
            || self
                .covariances
                .iter()
                .any(|s| s.len() != d || s.iter().any(|r| r.len() != d))
        {
            return invalid(format!("covariances: expected {c} matrices of size {d}x{d}"));
        }
        for (name, counts) in [("source_counts", &self.source_counts), ("target_counts", &self.target_counts)] {
            if counts.len() != c {
                return invalid(format!("{name}: expected {c} entries"));
            }
            if counts.iter().sum::<usize>() == 0 {
                return invalid(format!("{name}: no samples requested"));
            }
        }
        if !(0.0..360.0).contains(&self.rotation_deg) {
            return invalid("rotation_deg: must lie in [0, 360)");
        }
        if d < 2 && self.rotation_deg != 0.0 {
            return invalid("rotation_deg: rotation needs at least 2 dimensions");
        }
        if self.translation.len() != d {
            return invalid(format!("translation: expected length {d}"));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return invalid("noise: must be finite and nonnegative");
        }
        let finite = self.means.iter().flatten().all(|v| v.is_finite())
            && self.translation.iter().all(|v| v.is_finite());
        if !finite {
            return invalid("means/translation: non-finite value");
        }
        Ok(())
    }

    fn samplers(&self) -> Result<Vec<GaussianSampler>> {
        self.means
            .iter()
            .zip(&self.covariances)
            .enumerate()
            .map(|(c, (m, s))| {
                let cov = Matrix::from_rows(s)
                    .map_err(|e| Error::InvalidInput(format!("covariances[{c}]: {e}")))?;
                GaussianSampler::new(m, &cov)
                    .map_err(|e| Error::InvalidInput(format!("covariances[{c}]: {e}")))
            })
            .collect()
    }

    fn transform(&self, x: &mut [f64]) {
        if self.rotation_deg != 0.0 {
            let (s, c) = self.rotation_deg.to_radians().sin_cos();
            let (a, b) = (x[0], x[1]);
            x[0] = c * a - s * b;
            x[1] = s * a + c * b;
        }
        for (v, t) in x.iter_mut().zip(&self.translation) {
            *v += t;
        }
    }
}

fn draw(
    spec: &ShiftSpec,
    samplers: &[GaussianSampler],
    counts: &[usize],
    shifted: bool,
    rng: &mut SeededRng,
) -> Result<Dataset> {
    let d = spec.dim();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let noise = if shifted && spec.noise > 0.0 {
        Some(GaussianSampler::new(&vec![0.0; d], &Matrix::from_diag(&vec![spec.noise * spec.noise; d]))?)
    } else {
        None
    };
    for (c, (&n, sampler)) in counts.iter().zip(samplers).enumerate() {
        for _ in 0..n {
            let mut x = sampler.sample(rng);
            if shifted {
                spec.transform(&mut x);
                if let Some(noise) = &noise {
                    for (v, e) in x.iter_mut().zip(noise.sample(rng)) {
                        *v += e;
                    }
                }
            }
            rows.push(x);
            labels.push(c);
        }
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.shuffle(rng);
    let inputs = Matrix::from_rows(&order.iter().map(|&i| rows[i].clone()).collect::<Vec<_>>())?;
    let labels = order.iter().map(|&i| labels[i]).collect();
    Dataset::new(inputs, Some(labels), spec.classes)
}

/// Source rows come from the base mixture; target rows from the same mixture
/// followed by rotation, translation and noise. Both carry labels (the target
/// labels are for evaluation only). Rows are shuffled.
pub fn gen_synthetic(spec: &ShiftSpec, seed: u64) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let samplers = spec.samplers()?;
    let root = SeededRng::new(seed);
    let source = draw(spec, &samplers, &spec.source_counts, false, &mut root.split(1))?;
    let target = draw(spec, &samplers, &spec.target_counts, true, &mut root.split(2))?;
    Ok((source, target))
}

/// 17 significant digits; enough to round-trip any `f64`.
fn fmt17(v: f64) -> String {
    format!("{v:.16e}")
}

/// Reads `f0,...,f{d-1}[,label]`. `classes` bounds the label range; when
/// `None` it is inferred as `max(label) + 1` (or 0 without labels).
pub fn load_dataset(path: &Path, classes: Option<usize>) -> Result<Dataset> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| parse_err(1, e.to_string()))?;
    let header = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    let has_label = header.iter().next_back() == Some("label");
    let d = header.len() - usize::from(has_label);
    if d == 0 {
        return Err(parse_err(1, "no feature columns".into()));
    }
    for (i, name) in header.iter().take(d).enumerate() {
        if name != format!("f{i}") {
            return Err(parse_err(1, format!("column {i} is named {name:?}, expected \"f{i}\"")));
        }
    }
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line() as usize);
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line() as usize);
        if record.len() != header.len() {
            return Err(parse_err(
                line,
                format!("expected {} fields, found {}", header.len(), record.len()),
            ));
        }
        for (i, cell) in record.iter().take(d).enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("column f{i}: {cell:?} is not a number")))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("column f{i}: non-finite value")));
            }
            data.push(v);
        }
        if has_label {
            let cell = &record[d];
            let y: usize = cell
                .parse()
                .map_err(|_| parse_err(line, format!("label {cell:?} is not a nonnegative integer")))?;
            if let Some(c) = classes {
                if y >= c {
                    return Err(parse_err(line, format!("label {y} out of range (C = {c})")));
                }
            }
            labels.push(y);
        }
    }
    let m = data.len() / d;
    if m == 0 {
        return Err(parse_err(2, "no data rows".into()));
    }
    let classes = classes.unwrap_or_else(|| labels.iter().max().map_or(0, |&y| y + 1));
    Dataset::new(
        Matrix::new(m, d, data)?,
        has_label.then_some(labels),
        classes,
    )
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let mut header: Vec<String> = (0..dataset.dim()).map(|i| format!("f{i}")).collect();
    if dataset.labels.is_some() {
        header.push("label".into());
    }
    let to_io = |e: csv::Error| Error::Io(std::io::Error::other(e));
    writer.write_record(&header).map_err(to_io)?;
    for (r, row) in dataset.inputs.row_iter().enumerate() {
        let mut fields: Vec<String> = row.iter().map(|&v| fmt17(v)).collect();
        if let Some(labels) = &dataset.labels {
            fields.push(labels[r].to_string());
        }
        writer.write_record(&fields).map_err(to_io)?;
    }
    let bytes = writer.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    write_atomic(path, &bytes)
}

/// Writes to a sibling temporary file and renames it into place, so readers
/// never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = PathBuf::from(path);
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    tmp.set_file_name(format!(".{}.tmp", name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// A JSON number written with 17 significant digits.
struct Num(f64);

impl Serialize for Num {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let raw = RawValue::from_string(fmt17(self.0)).map_err(serde::ser::Error::custom)?;
        raw.serialize(s)
    }
}

fn nums(v: &[f64]) -> Vec<Num> {
    v.iter().map(|&x| Num(x)).collect()
}

fn num_rows(m: &Matrix) -> Vec<Vec<Num>> {
    m.row_iter().map(nums).collect()
}

#[derive(Serialize)]
struct LayerOut {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<Vec<Num>>,
    bias: Vec<Num>,
}

#[derive(Serialize)]
struct ClassifierOut {
    #[serde(rename = "W")]
    w: Vec<Vec<Num>>,
    b: Vec<Num>,
}

#[derive(Serialize)]
struct OptimizerOut {
    momentum: Num,
    lr: Num,
    buffers: Vec<Vec<Num>>,
}

#[derive(Serialize)]
struct CheckpointOut {
    format_version: u32,
    extractor_layers: Vec<LayerOut>,
    classifier: ClassifierOut,
    optimizer: OptimizerOut,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerIn {
    in_dim: usize,
    out_dim: usize,
    activation: Activation,
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct ClassifierIn {
    #[serde(rename = "W")]
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OptimizerIn {
    momentum: f64,
    lr: f64,
    buffers: Vec<Vec<f64>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointIn {
    #[allow(dead_code)]
    format_version: u32,
    extractor_layers: Vec<LayerIn>,
    classifier: ClassifierIn,
    optimizer: OptimizerIn,
}

#[derive(Deserialize)]
struct VersionProbe {
    format_version: u32,
}

pub fn checkpoint_to_string(model: &Model, optimizer: &OptimizerState) -> Result<String> {
    let out = CheckpointOut {
        format_version: CHECKPOINT_VERSION,
        extractor_layers: model
            .layers()
            .iter()
            .map(|l| LayerOut {
                in_dim: l.in_dim(),
                out_dim: l.out_dim(),
                activation: l.activation,
                weights: num_rows(&l.weights),
                bias: nums(&l.bias),
            })
            .collect(),
        classifier: ClassifierOut {
            w: num_rows(model.classifier_weights()),
            b: nums(model.classifier_bias()),
        },
        optimizer: OptimizerOut {
            momentum: Num(optimizer.momentum),
            lr: Num(optimizer.lr),
            buffers: optimizer.buffers.slices().into_iter().map(nums).collect(),
        },
    };
    let mut text = serde_json::to_string_pretty(&out)?;
    text.push('\n');
    Ok(text)
}

pub fn checkpoint_from_str(text: &str) -> Result<(Model, OptimizerState)> {
    let cerr = |m: String| Error::Checkpoint(m);
    let probe: VersionProbe =
        serde_json::from_str(text).map_err(|e| cerr(format!("malformed checkpoint: {e}")))?;
    if probe.format_version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: probe.format_version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let ck: CheckpointIn =
        serde_json::from_str(text).map_err(|e| cerr(format!("malformed checkpoint: {e}")))?;
    let mut layers = Vec::with_capacity(ck.extractor_layers.len());
    for (i, l) in ck.extractor_layers.into_iter().enumerate() {
        if l.weights.len() != l.out_dim || l.weights.iter().any(|r| r.len() != l.in_dim) {
            return Err(cerr(format!("layer {i}: weights do not match {}x{}", l.out_dim, l.in_dim)));
        }
        let weights = Matrix::new(l.out_dim, l.in_dim, l.weights.concat())
            .map_err(|e| cerr(format!("layer {i}: {e}")))?;
        layers.push(DenseLayer {
            weights,
            bias: l.bias,
            activation: l.activation,
        });
    }
    let c = ck.classifier.w.len();
    let d = ck.classifier.w.first().map_or(0, Vec::len);
    if ck.classifier.w.iter().any(|r| r.len() != d) {
        return Err(cerr("classifier: ragged weight rows".into()));
    }
    let w = Matrix::new(c, d, ck.classifier.w.concat()).map_err(|e| cerr(format!("classifier: {e}")))?;
    let model = Model::new(layers, w, ck.classifier.b).map_err(|e| cerr(e.to_string()))?;

    let mut buffers = GradientSet::zeros_like(&model);
    {
        let mut slots = buffers.slices_mut();
        if slots.len() != ck.optimizer.buffers.len() {
            return Err(cerr(format!(
                "optimizer: {} buffers for {} parameter arrays",
                ck.optimizer.buffers.len(),
                slots.len()
            )));
        }
        for (i, (slot, saved)) in slots.iter_mut().zip(&ck.optimizer.buffers).enumerate() {
            if slot.len() != saved.len() {
                return Err(cerr(format!("optimizer: buffer {i} has wrong length")));
            }
            slot.copy_from_slice(saved);
        }
    }
    if !buffers.is_finite() || !ck.optimizer.lr.is_finite() || !ck.optimizer.momentum.is_finite() {
        return Err(cerr("optimizer: non-finite state".into()));
    }
    Ok((
        model,
        OptimizerState {
            momentum: ck.optimizer.momentum,
            lr: ck.optimizer.lr,
            buffers,
        },
    ))
}

pub fn save_checkpoint(model: &Model, optimizer: &OptimizerState, path: &Path) -> Result<()> {
    write_atomic(path, checkpoint_to_string(model, optimizer)?.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<(Model, OptimizerState)> {
    checkpoint_from_str(&fs::read_to_string(path)?)
}
