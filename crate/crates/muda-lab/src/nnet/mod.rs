//! Compact MLP classifier with reverse-mode differentiation, stop-gradient,
//! losses, an SGD optimizer, and bit-exact checkpoint serialization.
//!
//! The model is a plain feed-forward stack: hidden layers use tanh, the last
//! layer is a linear classifier head, and the activation output of a
//! designated layer (the penultimate one by default) is the C-dimensional
//! feature representation used by every feature-level metric.

pub mod tape;

use std::fmt;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::linalg::DenseMatrix;
use tape::{Gradients, Tape, Var};

/// Errors from model construction, losses, and checkpoint IO.
#[derive(Debug, Error)]
pub enum NnetError {
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    #[error("non-finite value encountered: {context}")]
    NonFinite { context: String },
    #[error("label {label} out of range for {num_classes} classes")]
    LabelOutOfRange { label: usize, num_classes: usize },
    #[error("support violation at row {row}, class {class}: p > 0 where q = 0")]
    SupportViolation { row: usize, class: usize },
    #[error("row {row} is not a probability distribution (sum = {sum})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("loss must be scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("invalid model config: {context}")]
    InvalidConfig { context: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint format version {found} unsupported (expected {CHECKPOINT_VERSION})")]
    SchemaVersionMismatch { found: u64 },
    #[error("corrupt checkpoint payload: {detail}")]
    CorruptPayload { detail: String },
}

/// Hidden-layer nonlinearity. Tanh keeps finite-difference checks clean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
}

impl Activation {
    pub fn name(&self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, NnetError> {
        match name {
            "tanh" => Ok(Activation::Tanh),
            other => Err(NnetError::CorruptPayload { detail: format!("unknown activation {other:?}") }),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One affine layer: `x * weights + bias`, weights stored in_dim×out_dim.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

/// Feed-forward MLP classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layer_dims: Vec<usize>,
    layers: Vec<Layer>,
    activation: Activation,
    feature_layer_index: usize,
}

impl MlpModel {
    /// Seeded initialization: per-layer uniform in ±1/sqrt(fan_in). Requires
    /// at least one hidden layer so the head sits on a feature extractor.
    pub fn init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self, NnetError> {
        if layer_dims.len() < 3 {
            return Err(NnetError::InvalidConfig {
                context: format!("need at least one hidden layer, got dims {layer_dims:?}"),
            });
        }
        if layer_dims.iter().any(|&d| d == 0) {
            return Err(NnetError::InvalidConfig { context: "zero-width layer".into() });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = (0..layer_dims.len() - 1)
            .map(|i| draw_layer(layer_dims[i], layer_dims[i + 1], &mut rng))
            .collect();
        Ok(MlpModel {
            layer_dims: layer_dims.to_vec(),
            layers,
            activation,
            feature_layer_index: layer_dims.len() - 3,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Index of the layer whose activated output is the feature representation.
    pub fn feature_layer_index(&self) -> usize {
        self.feature_layer_index
    }

    /// Width of the feature representation (C).
    pub fn feature_dim(&self) -> usize {
        self.layer_dims[self.feature_layer_index + 1]
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weights.data().len() + l.bias.len()).sum()
    }

    /// Redraw layers `first..` from the seeded init distribution, leaving
    /// earlier layers untouched.
    pub fn reinit_layers_from_seed(&mut self, first: usize, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in first..self.layers.len() {
            self.layers[i] = draw_layer(self.layer_dims[i], self.layer_dims[i + 1], &mut rng);
        }
    }

    /// Forward pass over a batch (rows are samples).
    pub fn forward(&self, inputs: &DenseMatrix) -> Result<ForwardPass, NnetError> {
        if inputs.cols() != self.input_dim() {
            return Err(NnetError::ShapeMismatch {
                context: format!("input width {} != d_in {}", inputs.cols(), self.input_dim()),
            });
        }
        if inputs.data().iter().any(|v| !v.is_finite()) {
            return Err(NnetError::NonFinite { context: "forward input".into() });
        }
        let mut x = inputs.clone();
        let mut features = None;
        for (i, layer) in self.layers.iter().enumerate() {
            let mut z = x.matmul(&layer.weights);
            for r in 0..z.rows() {
                for c in 0..z.cols() {
                    let v = z.get(r, c) + layer.bias[c];
                    z.set(r, c, v);
                }
            }
            if i < self.layers.len() - 1 {
                for v in z.data_mut() {
                    *v = v.tanh();
                }
                if i == self.feature_layer_index {
                    features = Some(z.clone());
                }
            }
            x = z;
        }
        let logits = x;
        let probs = softmax_rows(&logits);
        Ok(ForwardPass { features: features.expect("feature layer always precedes the head"), logits, probs })
    }
}

fn draw_layer(in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Layer {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let data = (0..in_dim * out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    let bias = (0..out_dim).map(|_| rng.gen_range(-bound..bound)).collect();
    Layer { weights: DenseMatrix::from_vec_unchecked(in_dim, out_dim, data), bias }
}

/// Outputs of one forward pass.
pub struct ForwardPass {
    /// Penultimate activation, batch×C.
    pub features: DenseMatrix,
    /// Pre-softmax scores, batch×num_classes.
    pub logits: DenseMatrix,
    /// Softmax rows (each sums to 1).
    pub probs: DenseMatrix,
}

/// Row-wise softmax with max-subtraction.
pub fn softmax_rows(logits: &DenseMatrix) -> DenseMatrix {
    let mut out = logits.clone();
    for r in 0..logits.rows() {
        let row_max = logits.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for c in 0..logits.cols() {
            let e = (logits.get(r, c) - row_max).exp();
            out.set(r, c, e);
            sum += e;
        }
        for c in 0..logits.cols() {
            out.set(r, c, out.get(r, c) / sum);
        }
    }
    out
}

/// Mean negative log softmax probability of the true class.
pub fn cross_entropy(logits: &DenseMatrix, labels: &[usize]) -> Result<f64, NnetError> {
    if logits.rows() != labels.len() {
        return Err(NnetError::ShapeMismatch {
            context: format!("{} logit rows vs {} labels", logits.rows(), labels.len()),
        });
    }
    let classes = logits.cols();
    for &l in labels {
        if l >= classes {
            return Err(NnetError::LabelOutOfRange { label: l, num_classes: classes });
        }
    }
    let mut total = 0.0;
    for (r, &l) in labels.iter().enumerate() {
        let row_max = logits.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = logits.row(r).iter().map(|x| (x - row_max).exp()).sum::<f64>().ln() + row_max;
        total -= logits.get(r, l) - lse;
    }
    Ok(total / labels.len() as f64)
}

const ROW_SUM_TOL: f64 = 1e-6;

/// Mean over rows of `sum_c p_c ln(p_c / q_c)`, with `0 ln(0/x) = 0`.
pub fn kl_divergence(p: &DenseMatrix, q: &DenseMatrix) -> Result<f64, NnetError> {
    if p.rows() != q.rows() || p.cols() != q.cols() {
        return Err(NnetError::ShapeMismatch {
            context: format!("p {}x{} vs q {}x{}", p.rows(), p.cols(), q.rows(), q.cols()),
        });
    }
    for (m, name) in [(p, "p"), (q, "q")] {
        for r in 0..m.rows() {
            let sum: f64 = m.row(r).iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOL {
                let _ = name;
                return Err(NnetError::NotNormalized { row: r, sum });
            }
        }
    }
    let mut total = 0.0;
    for r in 0..p.rows() {
        for c in 0..p.cols() {
            let pc = p.get(r, c);
            if pc > 0.0 {
                let qc = q.get(r, c);
                if qc <= 0.0 {
                    return Err(NnetError::SupportViolation { row: r, class: c });
                }
                total += pc * (pc / qc).ln();
            }
        }
    }
    Ok(total / p.rows() as f64)
}

/// Model parameters registered on a tape, one `Var` per weight/bias.
pub struct TapedModel {
    pub weights: Vec<Var>,
    pub biases: Vec<Var>,
    activation: Activation,
    feature_layer_index: usize,
}

/// Register every parameter of `model` as tracked leaves on `tape`.
pub fn register_model(tape: &mut Tape, model: &MlpModel) -> TapedModel {
    let mut weights = Vec::with_capacity(model.num_layers());
    let mut biases = Vec::with_capacity(model.num_layers());
    for layer in model.layers() {
        weights.push(tape.param(layer.weights.clone()));
        biases.push(tape.param(DenseMatrix::from_vec_unchecked(1, layer.bias.len(), layer.bias.clone())));
    }
    TapedModel {
        weights,
        biases,
        activation: model.activation(),
        feature_layer_index: model.feature_layer_index(),
    }
}

/// Taped forward pass; returns (features, logits) vars.
pub fn forward_taped(tape: &mut Tape, model: &TapedModel, inputs: Var) -> (Var, Var) {
    debug_assert_eq!(model.activation, Activation::Tanh);
    let mut x = inputs;
    let mut features = None;
    let last = model.weights.len() - 1;
    for i in 0..model.weights.len() {
        let z = tape.matmul(x, model.weights[i]);
        let z = tape.add_row_broadcast(z, model.biases[i]);
        x = if i < last {
            let a = tape.tanh(z);
            if i == model.feature_layer_index {
                features = Some(a);
            }
            a
        } else {
            z
        };
    }
    (features.expect("feature layer precedes the head"), x)
}

/// Taped mean cross-entropy of `logits` against integer labels.
pub fn cross_entropy_taped(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var, NnetError> {
    let classes = tape.value(logits).cols();
    for &l in labels {
        if l >= classes {
            return Err(NnetError::LabelOutOfRange { label: l, num_classes: classes });
        }
    }
    if tape.value(logits).rows() != labels.len() {
        return Err(NnetError::ShapeMismatch {
            context: format!("{} logit rows vs {} labels", tape.value(logits).rows(), labels.len()),
        });
    }
    let ls = tape.log_softmax_rows(logits);
    let picked = tape.pick_per_row(ls, labels);
    let total = tape.sum_all(picked);
    Ok(tape.scalar_mul(total, -1.0 / labels.len() as f64))
}

/// Taped mean KL(softmax(logits) ‖ target) against a constant log-target
/// matrix (the target is detached by construction).
pub fn kl_to_constant_target_taped(tape: &mut Tape, logits: Var, log_target: DenseMatrix) -> Var {
    let rows = tape.value(logits).rows();
    let ls = tape.log_softmax_rows(logits);
    let p = tape.exp(ls);
    let lt = tape.constant(log_target);
    let diff = tape.sub(ls, lt);
    let prod = tape.mul(p, diff);
    let total = tape.sum_all(prod);
    tape.scalar_mul(total, 1.0 / rows as f64)
}

/// Gradients of a scalar loss with respect to every model parameter.
pub struct ModelGradients {
    pub weights: Vec<DenseMatrix>,
    pub biases: Vec<DenseMatrix>,
}

impl ModelGradients {
    pub fn extract(tape: &Tape, grads: &Gradients, model: &TapedModel) -> Self {
        ModelGradients {
            weights: model.weights.iter().map(|&v| grads.get(tape, v)).collect(),
            biases: model.biases.iter().map(|&v| grads.get(tape, v)).collect(),
        }
    }

    pub fn zeros_like(model: &MlpModel) -> Self {
        ModelGradients {
            weights: model
                .layers()
                .iter()
                .map(|l| DenseMatrix::zeros(l.weights.rows(), l.weights.cols()))
                .collect(),
            biases: model.layers().iter().map(|l| DenseMatrix::zeros(1, l.bias.len())).collect(),
        }
    }

    /// Flip the sign of every gradient (gradient-ascent methods).
    pub fn negate(&mut self) {
        for g in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            for v in g.data_mut() {
                *v = -*v;
            }
        }
    }
}

/// SGD hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SgdConfig {
    pub learning_rate: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default = "default_lr_decay")]
    pub lr_decay: f64,
    #[serde(default)]
    pub momentum: f64,
}

fn default_lr_decay() -> f64 {
    1.0
}

impl SgdConfig {
    pub fn validate(&self) -> Result<(), NnetError> {
        let ok = self.learning_rate.is_finite()
            && self.learning_rate > 0.0
            && self.weight_decay.is_finite()
            && self.weight_decay >= 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.momentum.is_finite()
            && self.momentum >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(NnetError::InvalidConfig { context: format!("bad sgd config {self:?}") })
        }
    }
}

/// SGD with per-step exponential learning-rate decay, decoupled-style weight
/// decay folded into the gradient, and optional momentum.
///
/// Update: `θ ← θ − lr_t (g + wd·θ)` with `lr_t = lr · decay^step`.
pub struct SgdOptimizer {
    cfg: SgdConfig,
    step_index: usize,
    velocity: Option<ModelGradients>,
}

impl SgdOptimizer {
    pub fn new(cfg: SgdConfig) -> Self {
        SgdOptimizer { cfg, step_index: 0, velocity: None }
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.learning_rate * self.cfg.lr_decay.powi(self.step_index as i32)
    }

    /// Apply one step. `trainable` masks whole layers; a `None` mask trains
    /// everything.
    pub fn step_masked(
        &mut self,
        model: &mut MlpModel,
        grads: &ModelGradients,
        trainable: Option<&[bool]>,
    ) -> Result<(), NnetError> {
        check_grad_shapes(model, grads)?;
        let lr = self.current_lr();
        let wd = self.cfg.weight_decay;
        let m = self.cfg.momentum;
        if m > 0.0 && self.velocity.is_none() {
            self.velocity = Some(ModelGradients::zeros_like(model));
        }
        for (i, layer) in model.layers.iter_mut().enumerate() {
            if let Some(mask) = trainable {
                if !mask[i] {
                    continue;
                }
            }
            for (j, w) in layer.weights.data_mut().iter_mut().enumerate() {
                let g = grads.weights[i].data()[j] + wd * *w;
                let d = match &mut self.velocity {
                    Some(vel) => {
                        let slot = &mut vel.weights[i].data_mut()[j];
                        *slot = m * *slot + g;
                        *slot
                    }
                    None => g,
                };
                *w -= lr * d;
            }
            for (j, b) in layer.bias.iter_mut().enumerate() {
                let g = grads.biases[i].data()[j] + wd * *b;
                let d = match &mut self.velocity {
                    Some(vel) => {
                        let slot = &mut vel.biases[i].data_mut()[j];
                        *slot = m * *slot + g;
                        *slot
                    }
                    None => g,
                };
                *b -= lr * d;
            }
        }
        self.step_index += 1;
        Ok(())
    }

    pub fn step(&mut self, model: &mut MlpModel, grads: &ModelGradients) -> Result<(), NnetError> {
        self.step_masked(model, grads, None)
    }
}

fn check_grad_shapes(model: &MlpModel, grads: &ModelGradients) -> Result<(), NnetError> {
    if grads.weights.len() != model.layers.len() || grads.biases.len() != model.layers.len() {
        return Err(NnetError::ShapeMismatch { context: "gradient layer count".into() });
    }
    for (i, layer) in model.layers.iter().enumerate() {
        if grads.weights[i].rows() != layer.weights.rows()
            || grads.weights[i].cols() != layer.weights.cols()
            || grads.biases[i].cols() != layer.bias.len()
        {
            return Err(NnetError::ShapeMismatch { context: format!("gradient shape at layer {i}") });
        }
    }
    Ok(())
}

pub const CHECKPOINT_VERSION: u64 = 1;

/// Write a checkpoint as a JSON document with floats at 17 significant
/// digits, which round-trips every f64 bit-exactly.
pub fn save_checkpoint(model: &MlpModel, path: &Path) -> Result<(), NnetError> {
    let mut out = String::new();
    out.push_str("{\n");
    out.push_str(&format!("  \"format_version\": {CHECKPOINT_VERSION},\n"));
    out.push_str(&format!(
        "  \"layer_dims\": [{}],\n",
        model.layer_dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
    ));
    out.push_str(&format!("  \"activation\": \"{}\",\n", model.activation.name()));
    out.push_str(&format!("  \"feature_layer_index\": {},\n", model.feature_layer_index));
    out.push_str("  \"layers\": [\n");
    for (i, layer) in model.layers.iter().enumerate() {
        out.push_str("    {\"weights\": [");
        out.push_str(&join_floats(layer.weights.data()));
        out.push_str("], \"bias\": [");
        out.push_str(&join_floats(&layer.bias));
        out.push_str("]}");
        out.push_str(if i + 1 < model.layers.len() { ",\n" } else { "\n" });
    }
    out.push_str("  ]\n}\n");

    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.16e}")).collect::<Vec<_>>().join(", ")
}

#[derive(serde::Deserialize)]
struct CheckpointDoc {
    format_version: u64,
    layer_dims: Vec<usize>,
    activation: String,
    feature_layer_index: usize,
    layers: Vec<CheckpointLayer>,
}

#[derive(serde::Deserialize)]
struct CheckpointLayer {
    weights: Vec<f64>,
    bias: Vec<f64>,
}

/// Load a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<MlpModel, NnetError> {
    let text = std::fs::read_to_string(path)?;
    // Peek at the version before full decoding so a wrong version is reported
    // as such rather than as a payload error.
    if let Ok(head) = serde_json::from_str::<serde_json::Value>(&text) {
        if let Some(v) = head.get("format_version").and_then(|v| v.as_u64()) {
            if v != CHECKPOINT_VERSION {
                return Err(NnetError::SchemaVersionMismatch { found: v });
            }
        }
    }
    let doc: CheckpointDoc = serde_json::from_str(&text)
        .map_err(|e| NnetError::CorruptPayload { detail: e.to_string() })?;
    if doc.format_version != CHECKPOINT_VERSION {
        return Err(NnetError::SchemaVersionMismatch { found: doc.format_version });
    }
    if doc.layer_dims.len() < 3 || doc.layers.len() != doc.layer_dims.len() - 1 {
        return Err(NnetError::CorruptPayload { detail: "layer count does not match dims".into() });
    }
    if doc.feature_layer_index + 2 > doc.layers.len() {
        return Err(NnetError::CorruptPayload { detail: "feature layer index out of range".into() });
    }
    let activation = Activation::from_name(&doc.activation)?;
    let mut layers = Vec::with_capacity(doc.layers.len());
    for (i, l) in doc.layers.into_iter().enumerate() {
        let (rows, cols) = (doc.layer_dims[i], doc.layer_dims[i + 1]);
        if l.weights.len() != rows * cols || l.bias.len() != cols {
            return Err(NnetError::CorruptPayload { detail: format!("layer {i} size mismatch") });
        }
        layers.push(Layer { weights: DenseMatrix::from_vec_unchecked(rows, cols, l.weights), bias: l.bias });
    }
    Ok(MlpModel {
        layer_dims: doc.layer_dims,
        layers,
        activation,
        feature_layer_index: doc.feature_layer_index,
    })
}
