//! Multilayer perceptron with local training and evaluation.
//!
//! The network is a chain of dense layers with ReLU between them and a
//! softmax-cross-entropy head. Parameters live in a [`ParameterSet`] with
//! layers `dense{i}.weight` of shape `[fan_in, fan_out]` and `dense{i}.bias`
//! of shape `[fan_out]`, so the whole training state moves through the
//! aggregation and privacy pipeline without a separate model object.
//!
//! Local training supports plain SGD and an adaptive-moment optimizer, plus
//! an optional proximal penalty `(mu / 2) * ||w - anchor||^2` that keeps
//! client models near the broadcast global model.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::metrics::{auc_micro_ovr, classification_metrics, EvalReport};
use crate::params::{ParameterSet, Tensor};
use crate::seeds;

/// Network architecture: input width, hidden layer widths, class count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dims: Vec<usize>, num_classes: usize) -> Result<Self> {
        if input_dim == 0 || num_classes < 2 || hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config(format!(
                "model needs positive input width, positive hidden widths, and >= 2 classes, \
                 got {input_dim} / {hidden_dims:?} / {num_classes}"
            )));
        }
        Ok(Self { input_dim, hidden_dims, num_classes })
    }

    /// Layer fan-in/fan-out pairs from input to output.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.num_classes));
        dims
    }
}

/// Local optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    /// Adam-style first/second moment estimates with bias correction.
    AdaptiveMoment,
}

/// Hyperparameters for one client's local pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
    /// Strength of the proximal pull toward the starting parameters;
    /// 0 disables the term.
    pub proximal_mu: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::Config(format!(
                "learning rate must be finite and non-negative, got {}",
                self.learning_rate
            )));
        }
        if !self.proximal_mu.is_finite() || self.proximal_mu < 0.0 {
            return Err(Error::Config(format!(
                "proximal mu must be finite and non-negative, got {}",
                self.proximal_mu
            )));
        }
        Ok(())
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPSILON: f64 = 1e-8;

/// Initializes parameters for the architecture: weights uniform in
/// `+-sqrt(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(spec: &ModelSpec, seed: u64) -> ParameterSet {
    let mut rng = seeds::derive_rng(seed, "init", &[]);
    let mut layers = Vec::new();
    for (i, (fan_in, fan_out)) in spec.layer_dims().into_iter().enumerate() {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let values: Vec<f64> =
            (0..fan_in * fan_out).map(|_| rng.gen_range(-bound..bound)).collect();
        layers.push((
            format!("dense{i}.weight"),
            Tensor::new(vec![fan_in, fan_out], values).expect("weight tensor"),
        ));
        layers.push((
            format!("dense{i}.bias"),
            Tensor::new(vec![fan_out], vec![0.0; fan_out]).expect("bias tensor"),
        ));
    }
    ParameterSet::new(layers).expect("unique layer names")
}

/// Recovers the architecture from a parameter set, validating the
/// weight/bias alternation and the chained shapes.
pub fn infer_spec(params: &ParameterSet) -> Result<ModelSpec> {
    let layers = params.layers();
    if layers.is_empty() || layers.len() % 2 != 0 {
        return Err(Error::ShapeMismatch {
            expected: "alternating weight/bias layers".into(),
            got: format!("{} layers", layers.len()),
        });
    }
    let mut dims = Vec::new();
    for pair in layers.chunks(2) {
        let (_, w) = &pair[0];
        let (_, b) = &pair[1];
        if w.shape().len() != 2 || b.shape().len() != 1 || b.shape()[0] != w.shape()[1] {
            return Err(Error::ShapeMismatch {
                expected: "weight [in, out] followed by bias [out]".into(),
                got: format!("{:?} / {:?}", w.shape(), b.shape()),
            });
        }
        dims.push((w.shape()[0], w.shape()[1]));
    }
    for window in dims.windows(2) {
        if window[0].1 != window[1].0 {
            return Err(Error::ShapeMismatch {
                expected: format!("layer fan-in {}", window[0].1),
                got: format!("{}", window[1].0),
            });
        }
    }
    let input_dim = dims[0].0;
    let num_classes = dims.last().expect("at least one layer").1;
    let hidden_dims = dims[..dims.len() - 1].iter().map(|d| d.1).collect();
    ModelSpec::new(input_dim, hidden_dims, num_classes)
}

/// `out[m x n] = a[m x k] . b[k x n]`
fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    debug_assert_eq!(out.len(), m * n);
    out.fill(0.0);
    for i in 0..m {
        for l in 0..k {
            let av = a[i * k + l];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

struct ForwardPass {
    /// `activations[0]` is the input batch; `activations[l]` the post-ReLU
    /// output of layer `l-1`. The final linear output (logits) is separate.
    activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn forward(params: &ParameterSet, spec: &ModelSpec, batch: &[f64], rows: usize) -> ForwardPass {
    let dims = spec.layer_dims();
    let mut activations = vec![batch.to_vec()];
    let mut logits = Vec::new();
    for (layer, &(fan_in, fan_out)) in dims.iter().enumerate() {
        let w = params.layers()[2 * layer].1.values();
        let b = params.layers()[2 * layer + 1].1.values();
        let mut z = vec![0.0; rows * fan_out];
        matmul(&activations[layer], w, rows, fan_in, fan_out, &mut z);
        for row in z.chunks_mut(fan_out) {
            for (zv, &bv) in row.iter_mut().zip(b) {
                *zv += bv;
            }
        }
        if layer + 1 == dims.len() {
            logits = z;
        } else {
            for zv in &mut z {
                if *zv < 0.0 {
                    *zv = 0.0;
                }
            }
            activations.push(z);
        }
    }
    ForwardPass { activations, logits }
}

/// Row-wise softmax probabilities and mean cross-entropy, evaluated through
/// log-sum-exp for stability.
fn softmax_cross_entropy(logits: &[f64], labels: &[usize], k: usize) -> (Vec<f64>, f64) {
    let rows = labels.len();
    let mut probs = vec![0.0; rows * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * k..(i + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            probs[i * k + j] = e;
            sum += e;
        }
        for p in &mut probs[i * k..(i + 1) * k] {
            *p /= sum;
        }
        let lse = max + sum.ln();
        loss += lse - row[y];
    }
    (probs, loss / rows as f64)
}

/// Mean cross-entropy and its gradient on one batch, with an optional
/// proximal penalty `(mu / 2) * ||params - anchor||^2`.
///
/// `features` is row-major with `labels.len()` rows of the model's input
/// width. A positive `proximal_mu` requires an `anchor` of matching shape.
pub fn loss_and_gradient(
    params: &ParameterSet,
    features: &[f64],
    labels: &[usize],
    proximal_mu: f64,
    anchor: Option<&ParameterSet>,
) -> Result<(f64, ParameterSet)> {
    let spec = infer_spec(params)?;
    let rows = labels.len();
    if rows == 0 {
        return Err(Error::EmptyInput("empty batch"));
    }
    if features.len() != rows * spec.input_dim {
        return Err(Error::WidthMismatch {
            expected: rows * spec.input_dim,
            got: features.len(),
            row: 0,
        });
    }
    for &y in labels {
        if y >= spec.num_classes {
            return Err(Error::LabelOutOfRange { label: y, num_classes: spec.num_classes });
        }
    }
    if proximal_mu > 0.0 && anchor.is_none() {
        return Err(Error::Config("proximal term requires an anchor parameter set".into()));
    }

    let pass = forward(params, &spec, features, rows);
    let (probs, mut loss) = softmax_cross_entropy(&pass.logits, labels, spec.num_classes);

    // d(loss)/d(logits) = (p - onehot) / rows
    let mut dz = probs;
    for (i, &y) in labels.iter().enumerate() {
        dz[i * spec.num_classes + y] -= 1.0;
    }
    for v in &mut dz {
        *v /= rows as f64;
    }

    let dims = spec.layer_dims();
    let mut grad = params.zeros_like();
    for layer in (0..dims.len()).rev() {
        let (fan_in, fan_out) = dims[layer];
        let a_prev = &pass.activations[layer];
        {
            let dw = grad.layers_mut()[2 * layer].1.values_mut();
            // dW = a_prev^T . dz, accumulated row by row.
            for i in 0..rows {
                for l in 0..fan_in {
                    let av = a_prev[i * fan_in + l];
                    if av == 0.0 {
                        continue;
                    }
                    let dz_row = &dz[i * fan_out..(i + 1) * fan_out];
                    let dw_row = &mut dw[l * fan_out..(l + 1) * fan_out];
                    for (d, &g) in dw_row.iter_mut().zip(dz_row) {
                        *d += av * g;
                    }
                }
            }
        }
        {
            let db = grad.layers_mut()[2 * layer + 1].1.values_mut();
            for i in 0..rows {
                for (d, &g) in db.iter_mut().zip(&dz[i * fan_out..(i + 1) * fan_out]) {
                    *d += g;
                }
            }
        }
        if layer > 0 {
            // da_prev = dz . W^T, masked by ReLU'(a_prev).
            let w = params.layers()[2 * layer].1.values();
            let mut da = vec![0.0; rows * fan_in];
            for i in 0..rows {
                for l in 0..fan_in {
                    if a_prev[i * fan_in + l] == 0.0 {
                        continue; // ReLU gradient is zero here
                    }
                    let mut acc = 0.0;
                    for j in 0..fan_out {
                        acc += dz[i * fan_out + j] * w[l * fan_out + j];
                    }
                    da[i * fan_in + l] = acc;
                }
            }
            dz = da;
        }
    }

    if proximal_mu > 0.0 {
        let anchor = anchor.expect("checked above");
        if !params.same_shape(anchor) {
            return Err(Error::ShapeMismatch {
                expected: "anchor with the model's shape".into(),
                got: "different layer layout".into(),
            });
        }
        let mut penalty = 0.0;
        for (((_, g), (_, w)), (_, a)) in
            grad.layers_mut().iter_mut().zip(params.layers()).zip(anchor.layers())
        {
            for ((gv, &wv), &av) in g.values_mut().iter_mut().zip(w.values()).zip(a.values()) {
                let diff = wv - av;
                penalty += diff * diff;
                *gv += proximal_mu * diff;
            }
        }
        loss += 0.5 * proximal_mu * penalty;
    }

    Ok((loss, grad))
}

struct AdamState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: u64,
}

impl AdamState {
    fn new(params: &ParameterSet) -> Self {
        let zeros: Vec<Vec<f64>> =
            params.layers().iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self { m: zeros.clone(), v: zeros, step: 0 }
    }

    fn apply(&mut self, params: &mut ParameterSet, grad: &ParameterSet, lr: f64) {
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (layer, (_, w)) in params.layers_mut().iter_mut().enumerate() {
            let g = grad.layers()[layer].1.values();
            let m = &mut self.m[layer];
            let v = &mut self.v[layer];
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                w.values_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}

/// Trains a copy of `params` on the dataset and returns it.
///
/// Runs `epochs` passes of mini-batch updates over a fresh shuffle each
/// epoch, all driven by `config.seed`; the same inputs always produce
/// bit-identical parameters. A positive `proximal_mu` pulls toward the
/// parameters passed in (the broadcast global model).
pub fn train_local(
    params: &ParameterSet,
    dataset: &LabeledDataset,
    config: &TrainConfig,
) -> Result<ParameterSet> {
    config.validate()?;
    let spec = infer_spec(params)?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("empty dataset"));
    }
    if dataset.width() != spec.input_dim {
        return Err(Error::WidthMismatch {
            expected: spec.input_dim,
            got: dataset.width(),
            row: 0,
        });
    }
    if let Some(&label) = dataset.labels().iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes: spec.num_classes });
    }

    let anchor = if config.proximal_mu > 0.0 { Some(params.clone()) } else { None };
    let mut current = params.clone();
    let mut adam = match config.optimizer {
        Optimizer::AdaptiveMoment => Some(AdamState::new(params)),
        Optimizer::Sgd => None,
    };
    let mut rng = seeds::derive_rng(config.seed, "train", &[]);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut batch_features = Vec::new();
    let mut batch_labels = Vec::new();

    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            batch_features.clear();
            batch_labels.clear();
            for &i in chunk {
                batch_features.extend_from_slice(dataset.row(i));
                batch_labels.push(dataset.labels()[i]);
            }
            let (_, grad) = loss_and_gradient(
                &current,
                &batch_features,
                &batch_labels,
                config.proximal_mu,
                anchor.as_ref(),
            )?;
            match &mut adam {
                Some(state) => state.apply(&mut current, &grad, config.learning_rate),
                None => {
                    for ((_, w), (_, g)) in current.layers_mut().iter_mut().zip(grad.layers()) {
                        for (wv, &gv) in w.values_mut().iter_mut().zip(g.values()) {
                            *wv -= config.learning_rate * gv;
                        }
                    }
                }
            }
        }
    }
    Ok(current)
}

/// Evaluates the model on a dataset: mean cross-entropy, accuracy, per-class
/// precision/recall/F1 with macro averages, and micro one-vs-rest ROC-AUC.
/// Argmax ties resolve to the lowest class id.
pub fn evaluate(params: &ParameterSet, dataset: &LabeledDataset) -> Result<EvalReport> {
    let spec = infer_spec(params)?;
    if dataset.is_empty() {
        return Err(Error::EmptyInput("empty dataset"));
    }
    if dataset.width() != spec.input_dim {
        return Err(Error::WidthMismatch {
            expected: spec.input_dim,
            got: dataset.width(),
            row: 0,
        });
    }
    if let Some(&label) = dataset.labels().iter().find(|&&l| l >= spec.num_classes) {
        return Err(Error::LabelOutOfRange { label, num_classes: spec.num_classes });
    }
    let k = spec.num_classes;
    let pass = forward(params, &spec, dataset.features(), dataset.len());
    let (probs, loss) = softmax_cross_entropy(&pass.logits, dataset.labels(), k);
    let predictions: Vec<usize> = (0..dataset.len())
        .map(|i| {
            let row = &probs[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    let (per_class, macro_f1, macro_precision, accuracy) =
        classification_metrics(&predictions, dataset.labels(), k);
    let auc = auc_micro_ovr(&probs, dataset.labels(), k);
    Ok(EvalReport {
        loss,
        accuracy,
        per_class,
        macro_f1,
        macro_precision,
        auc_micro_ovr: auc,
        sample_count: dataset.len(),
    })
}
