//! Small differentiable models and the client-side local training loop.
//!
//! Models operate on a flat [`ParamVector`]; [`ModelSpec::layout`] says which
//! slice of it belongs to which tensor. Loss is mean cross-entropy over a batch.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datagen::Dataset;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LearnerError {
    #[error("dimension mismatch: expected {expected}, got {got} ({what})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("label {label} out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },
    #[error("local training needs at least one step")]
    ZeroSteps,
    #[error("batch size must be at least one")]
    ZeroBatch,
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("model dimensions must be positive")]
    InvalidSpec,
}

/// Flat vector holding every model parameter; also used for updates and buffers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn from_vec(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &ParamVector) {
        assert_eq!(self.len(), other.len(), "parameter length mismatch");
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += alpha * b;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.0.iter_mut().for_each(|v| *v *= factor);
    }

    pub fn scaled(&self, factor: f64) -> ParamVector {
        ParamVector(self.0.iter().map(|v| v * factor).collect())
    }

    pub fn fill_zero(&mut self) {
        self.0.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl std::ops::Sub for &ParamVector {
    type Output = ParamVector;

    fn sub(self, rhs: &ParamVector) -> ParamVector {
        assert_eq!(self.len(), rhs.len(), "parameter length mismatch");
        ParamVector(self.0.iter().zip(&rhs.0).map(|(a, b)| a - b).collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    SoftmaxRegression,
    /// One tanh hidden layer.
    Mlp1Hidden,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dim: usize,
    pub n_classes: usize,
}

/// Named slice of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub name: &'static str,
    pub range: Range<usize>,
    pub fan_in: usize,
}

impl ModelSpec {
    pub fn softmax(input_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::SoftmaxRegression,
            input_dim,
            hidden_dim: 0,
            n_classes,
        }
    }

    pub fn mlp(input_dim: usize, hidden_dim: usize, n_classes: usize) -> Self {
        ModelSpec {
            kind: ModelKind::Mlp1Hidden,
            input_dim,
            hidden_dim,
            n_classes,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        let hidden_ok = self.kind == ModelKind::SoftmaxRegression || self.hidden_dim > 0;
        if self.input_dim == 0 || self.n_classes == 0 || !hidden_ok {
            return Err(LearnerError::InvalidSpec);
        }
        Ok(())
    }

    pub fn layout(&self) -> Vec<Segment> {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        let mut out = Vec::new();
        let mut at = 0;
        let mut push = |name, len, fan_in| {
            out.push(Segment {
                name,
                range: at..at + len,
                fan_in,
            });
            at += len;
        };
        match self.kind {
            ModelKind::SoftmaxRegression => {
                push("weight", c * d, d);
                push("bias", c, d);
            }
            ModelKind::Mlp1Hidden => {
                push("hidden.weight", h * d, d);
                push("hidden.bias", h, d);
                push("output.weight", c * h, h);
                push("output.bias", c, h);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.layout().last().map_or(0, |s| s.range.end)
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` per layer.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut w = ParamVector::zeros(self.param_count());
        for seg in self.layout() {
            let bound = 1.0 / (seg.fan_in as f64).sqrt();
            for v in &mut w.as_mut_slice()[seg.range] {
                *v = rng.random_range(-bound..=bound);
            }
        }
        w
    }

    fn check_params(&self, w: &ParamVector) -> Result<(), LearnerError> {
        if w.len() != self.param_count() {
            return Err(LearnerError::DimensionMismatch {
                what: "parameter vector",
                expected: self.param_count(),
                got: w.len(),
            });
        }
        Ok(())
    }

    fn check_rows(&self, features: &[f64], labels: &[usize]) -> Result<(), LearnerError> {
        if features.len() != labels.len() * self.input_dim {
            return Err(LearnerError::DimensionMismatch {
                what: "feature matrix",
                expected: labels.len() * self.input_dim,
                got: features.len(),
            });
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(LearnerError::LabelOutOfRange {
                label,
                n_classes: self.n_classes,
            });
        }
        Ok(())
    }

    /// Writes the logits of one sample into `logits`; `hidden` is scratch for the MLP.
    fn forward(&self, w: &[f64], x: &[f64], hidden: &mut [f64], logits: &mut [f64]) {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        match self.kind {
            ModelKind::SoftmaxRegression => {
                let (weight, bias) = w.split_at(c * d);
                affine(weight, bias, x, logits);
            }
            ModelKind::Mlp1Hidden => {
                let (w1, rest) = w.split_at(h * d);
                let (b1, rest) = rest.split_at(h);
                let (w2, b2) = rest.split_at(c * h);
                affine(w1, b1, x, hidden);
                hidden.iter_mut().for_each(|v| *v = v.tanh());
                affine(w2, b2, hidden, logits);
            }
        }
    }

    /// Mean cross-entropy over the rows, and its gradient when `grad` is given.
    fn loss_and_grad(
        &self,
        w: &[f64],
        features: &[f64],
        labels: &[usize],
        mut grad: Option<&mut [f64]>,
    ) -> f64 {
        let (d, h, c) = (self.input_dim, self.hidden_dim, self.n_classes);
        let n = labels.len();
        let inv_n = 1.0 / n as f64;
        let mut hidden = vec![0.0; h];
        let mut logits = vec![0.0; c];
        let mut dhidden = vec![0.0; h];
        let mut total = 0.0;
        if let Some(g) = grad.as_deref_mut() {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
        for (x, &y) in features.chunks_exact(d).zip(labels) {
            self.forward(w, x, &mut hidden, &mut logits);
            let lse = log_sum_exp(&logits);
            total += lse - logits[y];
            let Some(g) = grad.as_deref_mut() else {
                continue;
            };
            // logits now hold dL/dz scaled by 1/n
            for (k, z) in logits.iter_mut().enumerate() {
                let p = (*z - lse).exp();
                *z = (p - if k == y { 1.0 } else { 0.0 }) * inv_n;
            }
            match self.kind {
                ModelKind::SoftmaxRegression => {
                    let (gw, gb) = g.split_at_mut(c * d);
                    outer_acc(gw, gb, &logits, x);
                }
                ModelKind::Mlp1Hidden => {
                    let w2 = &w[h * d + h..h * d + h + c * h];
                    let (g1, g2) = g.split_at_mut(h * d + h);
                    let (gw2, gb2) = g2.split_at_mut(c * h);
                    outer_acc(gw2, gb2, &logits, &hidden);
                    dhidden.iter_mut().for_each(|v| *v = 0.0);
                    for (k, dz) in logits.iter().enumerate() {
                        for (j, dh) in dhidden.iter_mut().enumerate() {
                            *dh += w2[k * h + j] * dz;
                        }
                    }
                    for (dh, a) in dhidden.iter_mut().zip(&hidden) {
                        *dh *= 1.0 - a * a;
                    }
                    let (gw1, gb1) = g1.split_at_mut(h * d);
                    outer_acc(gw1, gb1, &dhidden, x);
                }
            }
        }
        total * inv_n
    }

    /// Mean cross-entropy of `w` on the batch.
    pub fn loss(&self, w: &ParamVector, batch: &Batch) -> Result<f64, LearnerError> {
        self.check_params(w)?;
        self.check_rows(&batch.features, &batch.labels)?;
        Ok(self.loss_and_grad(w.as_slice(), &batch.features, &batch.labels, None))
    }

    /// Gradient of mean cross-entropy with respect to `w`.
    pub fn grad(&self, w: &ParamVector, batch: &Batch) -> Result<ParamVector, LearnerError> {
        self.check_params(w)?;
        self.check_rows(&batch.features, &batch.labels)?;
        let mut g = ParamVector::zeros(w.len());
        self.loss_and_grad(
            w.as_slice(),
            &batch.features,
            &batch.labels,
            Some(g.as_mut_slice()),
        );
        Ok(g)
    }

    /// Index of the largest logit; ties go to the lowest class index.
    pub fn predict(&self, w: &ParamVector, x: &[f64]) -> usize {
        let mut hidden = vec![0.0; self.hidden_dim];
        let mut logits = vec![0.0; self.n_classes];
        self.forward(w.as_slice(), x, &mut hidden, &mut logits);
        argmax(&logits)
    }
}

fn affine(weight: &[f64], bias: &[f64], x: &[f64], out: &mut [f64]) {
    let cols = x.len();
    for ((o, row), b) in out.iter_mut().zip(weight.chunks_exact(cols)).zip(bias) {
        *o = b + row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

/// gw += dz ⊗ x, gb += dz
fn outer_acc(gw: &mut [f64], gb: &mut [f64], dz: &[f64], x: &[f64]) {
    for ((row, b), d) in gw.chunks_exact_mut(x.len()).zip(gb.iter_mut()).zip(dz) {
        *b += d;
        for (g, xi) in row.iter_mut().zip(x) {
            *g += d * xi;
        }
    }
}

fn log_sum_exp(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in z.iter().enumerate().skip(1) {
        if *v > z[best] {
            best = k;
        }
    }
    best
}

/// Mini-batch of row-major features and class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Vec<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(features: Vec<f64>, labels: Vec<usize>) -> Self {
        Batch { features, labels }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Uniform draw of `size` rows with replacement.
    pub fn sample<R: Rng + ?Sized>(data: &Dataset, size: usize, rng: &mut R) -> Batch {
        let d = data.dim();
        let mut features = Vec::with_capacity(size * d);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let i = rng.random_range(0..data.len());
            features.extend_from_slice(data.row(i));
            labels.push(data.labels()[i]);
        }
        Batch { features, labels }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

/// Optimizer with its moment buffers. A fresh state is built for every local round.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl OptimizerState {
    pub fn fresh(kind: OptimizerKind, lr: f64, len: usize) -> Self {
        let moments = match kind {
            OptimizerKind::Sgd => 0,
            OptimizerKind::Adam { .. } => len,
        };
        OptimizerState {
            kind,
            lr,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
            step: 0,
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn apply(&mut self, w: &mut ParamVector, g: &ParamVector) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => w.axpy(-self.lr, g),
            OptimizerKind::Adam { beta1, beta2, eps } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                let params = w.as_mut_slice().iter_mut().zip(g.as_slice());
                for ((p, gi), (m, v)) in params.zip(self.m.iter_mut().zip(self.v.iter_mut())) {
                    *m = beta1 * *m + (1.0 - beta1) * gi;
                    *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                    *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                }
            }
        }
    }
}

/// Result of one local round.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `w_initial - w_final`.
    pub delta: ParamVector,
    /// Norm of the gradient at every step, in order.
    pub grad_norms: Vec<f64>,
}

/// Client-side hyperparameters for a local round.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub batch_size: usize,
}

impl TrainSettings {
    pub fn sgd(lr: f64, batch_size: usize) -> Self {
        TrainSettings {
            optimizer: OptimizerKind::Sgd,
            lr,
            batch_size,
        }
    }
}

/// Runs `steps` optimizer steps from `w` on batches drawn uniformly with replacement.
pub fn local_train<R: Rng + ?Sized>(
    spec: &ModelSpec,
    w: &ParamVector,
    data: &Dataset,
    steps: u32,
    settings: &TrainSettings,
    rng: &mut R,
) -> Result<LocalUpdate, LearnerError> {
    let TrainSettings {
        optimizer,
        lr,
        batch_size,
    } = *settings;
    if steps == 0 {
        return Err(LearnerError::ZeroSteps);
    }
    if batch_size == 0 {
        return Err(LearnerError::ZeroBatch);
    }
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    spec.check_params(w)?;
    if data.dim() != spec.input_dim {
        return Err(LearnerError::DimensionMismatch {
            what: "dataset feature dimension",
            expected: spec.input_dim,
            got: data.dim(),
        });
    }
    let mut local = w.clone();
    let mut opt = OptimizerState::fresh(optimizer, lr, w.len());
    let mut grad_norms = Vec::with_capacity(steps as usize);
    for _ in 0..steps {
        let batch = Batch::sample(data, batch_size, rng);
        let g = spec.grad(&local, &batch)?;
        grad_norms.push(g.norm());
        opt.apply(&mut local, &g);
    }
    Ok(LocalUpdate {
        delta: w - &local,
        grad_norms,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy under argmax and mean cross-entropy on the full set.
pub fn evaluate(spec: &ModelSpec, w: &ParamVector, data: &Dataset) -> Result<Evaluation, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::EmptyDataset);
    }
    spec.check_params(w)?;
    spec.check_rows(data.features(), data.labels())?;
    let correct = (0..data.len())
        .filter(|&i| spec.predict(w, data.row(i)) == data.labels()[i])
        .count();
    let loss = spec.loss_and_grad(w.as_slice(), data.features(), data.labels(), None);
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        loss,
    })
}
