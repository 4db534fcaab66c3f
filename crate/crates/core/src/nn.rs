//! Small feed-forward classifier trained with plain mini-batch SGD.
//!
//! Weights of layer `i` are stored as a `layer_dims[i] x layer_dims[i+1]`
//! matrix, so a layer computes `z = x^T W + b`. Hidden layers apply the
//! configured activation; the last layer emits raw logits.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::LabeledDataset;
use crate::linalg::DenseMatrix;
use crate::rng::{split_seed, Rng};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: String,
        expected: usize,
        actual: usize,
    },
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("label {label} at row {row} is outside [0, {n_classes})")]
    LabelOutOfRange { row: usize, label: usize, n_classes: usize },
    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    NonFiniteLoss { iteration: usize, loss: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
    Tanh,
}

impl Activation {
    fn apply<T: Scalar>(self, z: T) -> T {
        match self {
            Activation::Relu => z.max(T::zero()),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative<T: Scalar>(self, z: T, a: T) -> T {
        match self {
            Activation::Relu => {
                if z > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Tanh => T::one() - a * a,
        }
    }
}

/// Layer sizes (input, hidden..., classes) plus hidden activation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub layer_dims: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Architecture {
    pub fn new(layer_dims: Vec<usize>, activation: Activation) -> Self {
        Self { layer_dims, activation }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layer_dims.len() < 2 {
            return Err(NnError::Shape(
                "layer_dims needs at least an input and an output size".into(),
            ));
        }
        if self.layer_dims.contains(&0) {
            return Err(NnError::Shape(format!(
                "layer_dims must be positive, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().expect("validated architecture")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Scalar + Serialize", deserialize = "T: Scalar + Deserialize<'de>"))]
pub struct MlpModel<T> {
    layer_dims: Vec<usize>,
    weights: Vec<DenseMatrix<T>>,
    biases: Vec<Vec<T>>,
    activation: Activation,
}

impl<T: Scalar> MlpModel<T> {
    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parameters(
        layer_dims: Vec<usize>,
        weights: Vec<DenseMatrix<T>>,
        biases: Vec<Vec<T>>,
        activation: Activation,
    ) -> Result<Self, NnError> {
        Architecture::new(layer_dims.clone(), activation).validate()?;
        let n_layers = layer_dims.len() - 1;
        if weights.len() != n_layers || biases.len() != n_layers {
            return Err(NnError::Shape(format!(
                "{n_layers} layers need {n_layers} weight matrices and bias vectors, got {} and {}",
                weights.len(),
                biases.len()
            )));
        }
        for i in 0..n_layers {
            let expect = (layer_dims[i], layer_dims[i + 1]);
            if weights[i].shape() != expect {
                return Err(NnError::Shape(format!(
                    "weights[{i}] is {:?}, expected {expect:?}",
                    weights[i].shape()
                )));
            }
            if biases[i].len() != layer_dims[i + 1] {
                return Err(NnError::Dimension {
                    context: format!("biases[{i}]"),
                    expected: layer_dims[i + 1],
                    actual: biases[i].len(),
                });
            }
            if !biases[i].iter().all(|b| b.is_finite()) {
                return Err(NnError::NonFinite(format!("biases[{i}]")));
            }
        }
        Ok(Self {
            layer_dims,
            weights,
            biases,
            activation,
        })
    }

    pub fn zeros(arch: &Architecture) -> Result<Self, NnError> {
        arch.validate()?;
        let dims = &arch.layer_dims;
        let weights = dims.windows(2).map(|w| DenseMatrix::zeros(w[0], w[1])).collect();
        let biases = dims[1..].iter().map(|&d| vec![T::zero(); d]).collect();
        Ok(Self {
            layer_dims: dims.clone(),
            weights,
            biases,
            activation: arch.activation,
        })
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` initialization.
    ///
    /// Draw order: for each layer, all weights row-major, then the biases.
    pub fn init(arch: &Architecture, rng: &mut Rng) -> Result<Self, NnError> {
        let mut model = Self::zeros(arch)?;
        for (w, b) in model.weights.iter_mut().zip(model.biases.iter_mut()) {
            let bound = 1.0 / (w.rows() as f64).sqrt();
            for v in w.data_mut() {
                *v = T::of(rng.uniform_in(-bound, bound));
            }
            for v in b.iter_mut() {
                *v = T::of(rng.uniform_in(-bound, bound));
            }
        }
        Ok(model)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn weights(&self) -> &[DenseMatrix<T>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Vec<T>] {
        &self.biases
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::new(self.layer_dims.clone(), self.activation)
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn n_parameters(&self) -> usize {
        self.layer_dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Logits for one feature vector.
    pub fn forward(&self, x: &[T]) -> Result<Vec<T>, NnError> {
        if x.len() != self.input_dim() {
            return Err(NnError::Dimension {
                context: "forward input".into(),
                expected: self.input_dim(),
                actual: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(NnError::NonFinite("forward input".into()));
        }
        Ok(self.forward_unchecked(x))
    }

    pub(crate) fn forward_unchecked(&self, x: &[T]) -> Vec<T> {
        let last = self.weights.len() - 1;
        let mut a = x.to_vec();
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let mut z = w.vec_mul(&a);
            for (zi, &bi) in z.iter_mut().zip(b) {
                *zi += bi;
            }
            if l < last {
                for zi in z.iter_mut() {
                    *zi = self.activation.apply(*zi);
                }
            }
            a = z;
        }
        a
    }

    /// Arg-max class for one feature vector (ties toward the lowest index).
    pub fn predict(&self, x: &[T]) -> Result<usize, NnError> {
        Ok(argmax(&self.forward(x)?))
    }

    /// Logits for every row of `features`.
    pub fn forward_batch(&self, features: &DenseMatrix<T>) -> Result<DenseMatrix<T>, NnError> {
        if features.cols() != self.input_dim() {
            return Err(NnError::Dimension {
                context: "feature columns".into(),
                expected: self.input_dim(),
                actual: features.cols(),
            });
        }
        let mut data = Vec::with_capacity(features.rows() * self.n_classes());
        for row in features.iter_rows() {
            data.extend(self.forward_unchecked(row));
        }
        DenseMatrix::new(features.rows(), self.n_classes(), data)
    }

    pub fn predict_batch(&self, features: &DenseMatrix<T>) -> Result<Vec<usize>, NnError> {
        let logits = self.forward_batch(features)?;
        Ok(logits.iter_rows().map(argmax).collect())
    }

    fn visit_parameters_mut(&mut self, mut f: impl FnMut(&mut T)) {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            w.data_mut().iter_mut().for_each(&mut f);
            b.iter_mut().for_each(&mut f);
        }
    }

    fn parameter_mut(&mut self, mut index: usize) -> &mut T {
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let wn = w.as_slice().len();
            if index < wn {
                return &mut w.data_mut()[index];
            }
            index -= wn;
            if index < b.len() {
                return &mut b[index];
            }
            index -= b.len();
        }
        panic!("parameter index out of range");
    }
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax<T: PartialOrd + Copy>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = logits.iter().map(|&z| (z - max).exp()).collect();
    let sum: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// `-log softmax(logits)[label]`, computed via log-sum-exp.
pub fn cross_entropy<T: Scalar>(logits: &[T], label: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
    lse - logits[label]
}

/// Gradients laid out exactly like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub weights: Vec<DenseMatrix<T>>,
    pub biases: Vec<Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    fn zeros_like(model: &MlpModel<T>) -> Self {
        Self {
            weights: model
                .weights
                .iter()
                .map(|w| DenseMatrix::zeros(w.rows(), w.cols()))
                .collect(),
            biases: model.biases.iter().map(|b| vec![T::zero(); b.len()]).collect(),
        }
    }

    /// Parameters flattened in model order (per layer: weights row-major, then biases).
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.as_slice());
            out.extend_from_slice(b);
        }
        out
    }
}

/// Mean cross-entropy over `rows` of `data` and its analytic gradient.
///
/// `weight_decay` adds `wd/2 * sum(W^2)` over weight matrices (not biases).
pub fn loss_and_gradient<T: Scalar>(
    model: &MlpModel<T>,
    data: &LabeledDataset<T>,
    rows: &[usize],
    weight_decay: f64,
) -> (T, Gradients<T>) {
    let mut grads = Gradients::zeros_like(model);
    let n_layers = model.weights.len();
    let inv_batch = T::one() / T::of_usize(rows.len().max(1));
    let mut total = T::zero();

    // pre-activations and activations per layer; activations[0] is the input
    let mut pre: Vec<Vec<T>> = vec![Vec::new(); n_layers];
    let mut act: Vec<Vec<T>> = vec![Vec::new(); n_layers + 1];

    for &r in rows {
        let x = data.features().row(r);
        let label = data.labels()[r];
        act[0].clear();
        act[0].extend_from_slice(x);
        for l in 0..n_layers {
            let mut z = model.weights[l].vec_mul(&act[l]);
            for (zi, &bi) in z.iter_mut().zip(&model.biases[l]) {
                *zi += bi;
            }
            let a: Vec<T> = if l + 1 < n_layers {
                z.iter().map(|&v| model.activation.apply(v)).collect()
            } else {
                z.clone()
            };
            pre[l] = z;
            act[l + 1] = a;
        }
        let logits = &act[n_layers];
        total += cross_entropy(logits, label);

        let mut delta = softmax(logits);
        delta[label] -= T::one();
        for d in delta.iter_mut() {
            *d *= inv_batch;
        }
        for l in (0..n_layers).rev() {
            let gw = &mut grads.weights[l];
            for (i, &ai) in act[l].iter().enumerate() {
                if ai == T::zero() {
                    continue;
                }
                for (g, &d) in gw.row_mut(i).iter_mut().zip(&delta) {
                    *g += ai * d;
                }
            }
            for (g, &d) in grads.biases[l].iter_mut().zip(&delta) {
                *g += d;
            }
            if l > 0 {
                let w = &model.weights[l];
                let mut prev = vec![T::zero(); w.rows()];
                for (i, p) in prev.iter_mut().enumerate() {
                    let s: T = w.row(i).iter().zip(&delta).map(|(&wij, &d)| wij * d).sum();
                    *p = s * model.activation.derivative(pre[l - 1][i], act[l][i]);
                }
                delta = prev;
            }
        }
    }

    let mut loss = total * inv_batch;
    if weight_decay > 0.0 {
        let wd = T::of(weight_decay);
        let half = T::of(0.5);
        for (g, w) in grads.weights.iter_mut().zip(&model.weights) {
            for (gi, &wi) in g.data_mut().iter_mut().zip(w.as_slice()) {
                *gi += wd * wi;
                loss += half * wd * wi * wi;
            }
        }
    }
    (loss, grads)
}

/// Mean cross-entropy of `model` over `rows` of `data`.
pub fn mean_loss<T: Scalar>(model: &MlpModel<T>, data: &LabeledDataset<T>, rows: &[usize]) -> T {
    let sum: T = rows
        .iter()
        .map(|&r| cross_entropy(&model.forward_unchecked(data.features().row(r)), data.labels()[r]))
        .sum();
    sum / T::of_usize(rows.len().max(1))
}

fn default_epochs() -> usize {
    200
}

fn default_learning_rate() -> f64 {
    0.05
}

fn default_batch_size() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: default_epochs(),
            learning_rate: default_learning_rate(),
            batch_size: default_batch_size(),
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epochs(mut self, epochs: usize) -> Self {
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.epochs == 0 {
            return Err(NnError::Config("epochs must be >= 1".into()));
        }
        // lr = 0 is accepted so that a zero step can be used as a no-op check
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(NnError::Config(format!(
                "learning_rate must be finite and >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(NnError::Config("batch_size must be >= 1".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(NnError::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        Ok(())
    }

    /// Seed of the initial weights: child 0 of `seed`.
    pub fn init_seed(&self) -> u64 {
        split_seed(self.seed, 0)
    }

    /// Seed of the epoch shuffling stream: child 1 of `seed`.
    pub fn shuffle_seed(&self) -> u64 {
        split_seed(self.seed, 1)
    }
}

/// A trained model plus the mean training loss of every epoch.
#[derive(Debug, Clone)]
pub struct TrainedModel<T> {
    pub model: MlpModel<T>,
    pub epoch_losses: Vec<f64>,
}

/// The model `train_sgd` starts from for this config.
pub fn initial_model<T: Scalar>(cfg: &TrainConfig, arch: &Architecture) -> Result<MlpModel<T>, NnError> {
    MlpModel::init(arch, &mut Rng::new(cfg.init_seed()))
}

fn check_data<T: Scalar>(data: &LabeledDataset<T>, arch: &Architecture) -> Result<(), NnError> {
    arch.validate()?;
    if data.n_samples() == 0 {
        return Err(NnError::Shape("training data is empty".into()));
    }
    if data.n_features() != arch.input_dim() {
        return Err(NnError::Dimension {
            context: "layer_dims[0] vs feature dimension".into(),
            expected: arch.input_dim(),
            actual: data.n_features(),
        });
    }
    let n_classes = arch.n_classes();
    if let Some((row, &label)) = data.labels().iter().enumerate().find(|(_, &l)| l >= n_classes) {
        return Err(NnError::LabelOutOfRange { row, label, n_classes });
    }
    Ok(())
}

/// Trains with mini-batch SGD on mean cross-entropy.
pub fn train_sgd<T: Scalar>(
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    arch: &Architecture,
) -> Result<MlpModel<T>, NnError> {
    train_sgd_traced(data, cfg, arch).map(|t| t.model)
}

/// Like [`train_sgd`], also returning the per-epoch loss curve.
pub fn train_sgd_traced<T: Scalar>(
    data: &LabeledDataset<T>,
    cfg: &TrainConfig,
    arch: &Architecture,
) -> Result<TrainedModel<T>, NnError> {
    cfg.validate()?;
    check_data(data, arch)?;
    let mut model = initial_model::<T>(cfg, arch)?;
    let mut shuffler = Rng::new(cfg.shuffle_seed());
    let lr = T::of(cfg.learning_rate);
    let n = data.n_samples();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut iteration = 0;

    for _ in 0..cfg.epochs {
        shuffler.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let (loss, grads) = loss_and_gradient(&model, data, batch, cfg.weight_decay);
            let loss = loss.as_f64();
            if !loss.is_finite() {
                return Err(NnError::NonFiniteLoss { iteration, loss });
            }
            epoch_loss += loss * batch.len() as f64;
            let flat = grads.flatten();
            if let Some(g) = flat.iter().find(|g| !g.is_finite()) {
                return Err(NnError::NonFiniteLoss {
                    iteration,
                    loss: g.as_f64(),
                });
            }
            let mut it = flat.into_iter();
            model.visit_parameters_mut(|p| {
                *p -= lr * it.next().expect("gradient layout matches model");
            });
            iteration += 1;
        }
        epoch_losses.push(epoch_loss / n as f64);
    }
    Ok(TrainedModel { model, epoch_losses })
}

/// Largest relative error between the analytic cross-entropy gradient and
/// central finite differences, over every parameter.
///
/// Relative error is `|a - f| / max(|a| + |f|, 1e-6)`; the floor keeps
/// parameters with vanishing gradient from amplifying round-off.
pub fn grad_check<T: Scalar>(model: &MlpModel<T>, batch: &LabeledDataset<T>, epsilon: f64) -> f64 {
    let rows: Vec<usize> = (0..batch.n_samples()).collect();
    let (_, grads) = loss_and_gradient(model, batch, &rows, 0.0);
    let analytic = grads.flatten();
    let mut probe = model.clone();
    let mut worst = 0.0f64;
    for (k, &a) in analytic.iter().enumerate() {
        let original = *probe.parameter_mut(k);
        *probe.parameter_mut(k) = original + T::of(epsilon);
        let plus = mean_loss(&probe, batch, &rows).as_f64();
        *probe.parameter_mut(k) = original - T::of(epsilon);
        let minus = mean_loss(&probe, batch, &rows).as_f64();
        *probe.parameter_mut(k) = original;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let a = a.as_f64();
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}
