//! Base learners: small MLPs trained with plain SGD, plus the task losses and
//! performance metrics used to judge them.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Lower bound applied to probabilities inside logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Identity,
    Sigmoid,
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskLossKind {
    Mse,
    Bce,
    Cce,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Mse,
    ErrorRate,
}

impl TaskLossKind {
    /// The output head this loss is paired with.
    pub fn head(self) -> Head {
        match self {
            TaskLossKind::Mse => Head::Identity,
            TaskLossKind::Bce => Head::Sigmoid,
            TaskLossKind::Cce => Head::Softmax,
        }
    }

    pub fn metric(self) -> MetricKind {
        match self {
            TaskLossKind::Mse => MetricKind::Mse,
            TaskLossKind::Bce | TaskLossKind::Cce => MetricKind::ErrorRate,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            TaskLossKind::Mse => "mse",
            TaskLossKind::Bce => "bce",
            TaskLossKind::Cce => "cce",
        }
    }
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Mse => "mse",
            MetricKind::ErrorRate => "error_rate",
        }
    }
}

/// Architecture of a base learner.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub sizes: Vec<usize>,
    pub head: Head,
    pub loss: TaskLossKind,
    pub bias: bool,
}

impl MlpSpec {
    /// Spec with biases and the head implied by `loss`.
    pub fn new(sizes: &[usize], loss: TaskLossKind) -> Result<Self> {
        Self::with_head(sizes, loss.head(), loss, true)
    }

    pub fn with_head(sizes: &[usize], head: Head, loss: TaskLossKind, bias: bool) -> Result<Self> {
        if sizes.len() < 2 {
            return Err(Error::config(
                "sizes",
                "need at least an input and an output layer",
            ));
        }
        if let Some(i) = sizes.iter().position(|&s| s == 0) {
            return Err(Error::config(
                format!("sizes[{i}]"),
                "layer width must be positive",
            ));
        }
        if loss.head() != head {
            return Err(Error::config(
                "head",
                format!(
                    "{head:?} head cannot be trained with {} task loss",
                    loss.name()
                ),
            ));
        }
        if head == Head::Softmax && sizes[sizes.len() - 1] < 2 {
            return Err(Error::config(
                "sizes",
                "softmax head needs at least two outputs",
            ));
        }
        Ok(MlpSpec {
            sizes: sizes.to_vec(),
            head,
            loss,
            bias,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        self.sizes[self.sizes.len() - 1]
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Shapes of the parameter tensors, in storage order.
    pub fn shapes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for w in self.sizes.windows(2) {
            out.push((w[0], w[1]));
            if self.bias {
                out.push((1, w[1]));
            }
        }
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Glorot-uniform weights (`±√(6/(fan_in+fan_out))`), zero biases.
pub fn init_glorot<T: Scalar, R: Rng + ?Sized>(rng: &mut R, spec: &MlpSpec) -> Vec<Tensor<T>> {
    let mut params = Vec::with_capacity(spec.shapes().len());
    for w in spec.sizes.windows(2) {
        let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound).expect("valid bound");
        params.push(Tensor::from_fn(w[0], w[1], |_, _| T::of(dist.sample(rng))));
        if spec.bias {
            params.push(Tensor::zeros(1, w[1]));
        }
    }
    params
}

/// Forward pass through the MLP on graph variables.
pub fn forward_graph<T: Scalar>(spec: &MlpSpec, g: &Graph<T>, params: &[Var], x: Var) -> Var {
    let per_layer = if spec.bias { 2 } else { 1 };
    let layers = spec.layers();
    let mut h = x;
    for l in 0..layers {
        let w = params[l * per_layer];
        let mut z = g.matmul(h, w);
        if spec.bias {
            z = g.add_row(z, params[l * per_layer + 1]);
        }
        h = if l + 1 < layers { g.relu(z) } else { z };
    }
    head_graph(spec.head, g, h)
}

pub fn head_graph<T: Scalar>(head: Head, g: &Graph<T>, z: Var) -> Var {
    match head {
        Head::Identity => z,
        Head::Sigmoid => g.sigmoid(z),
        Head::Softmax => g.softmax_rows(z),
    }
}

/// `θ − α·∇` on graph variables, keeping any provenance carried by the gradients.
pub fn sgd_step_graph<T: Scalar>(
    g: &Graph<T>,
    params: &[Var],
    grads: &[Var],
    alpha: T,
) -> Vec<Var> {
    params
        .iter()
        .zip(grads)
        .map(|(&p, &d)| g.sub(p, g.scale(d, alpha)))
        .collect()
}

#[derive(Debug, Clone)]
pub struct BaseLearner<T> {
    spec: MlpSpec,
    params: Vec<Tensor<T>>,
}

impl<T: Scalar> BaseLearner<T> {
    pub fn init_glorot<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        BaseLearner {
            spec: spec.clone(),
            params: init_glorot(rng, spec),
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        let params = spec
            .shapes()
            .into_iter()
            .map(|(r, c)| Tensor::zeros(r, c))
            .collect();
        BaseLearner {
            spec: spec.clone(),
            params,
        }
    }

    pub fn from_params(spec: &MlpSpec, params: Vec<Tensor<T>>) -> Result<Self> {
        let shapes = spec.shapes();
        if params.len() != shapes.len() || params.iter().zip(&shapes).any(|(p, &s)| p.shape() != s)
        {
            return Err(Error::Contract(
                "parameter shapes do not match the architecture".into(),
            ));
        }
        Ok(BaseLearner {
            spec: spec.clone(),
            params,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Tensor<T>> {
        self.params
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Places θ in `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    g.leaf(p.clone())
                } else {
                    g.constant(p.clone())
                }
            })
            .collect()
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        if x.cols() != self.spec.input_dim() {
            return Err(Error::Contract(format!(
                "input has {} columns, learner expects {}",
                x.cols(),
                self.spec.input_dim()
            )));
        }
        let g = Graph::new();
        g.set_recording(false);
        let params = self.bind(&g, false);
        let out = forward_graph(&self.spec, &g, &params, g.constant(x.clone()));
        let v = g.value(out).clone();
        Ok(v)
    }

    /// In-place `θ ← θ − α·grads`.
    pub fn sgd_step(&mut self, grads: &[Tensor<T>], alpha: T) -> Result<()> {
        if grads.len() != self.params.len()
            || grads
                .iter()
                .zip(&self.params)
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::Contract(
                "gradient shapes do not match parameters".into(),
            ));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            for (w, &d) in p.data_mut().iter_mut().zip(g.data()) {
                *w = *w - alpha * d;
            }
        }
        Ok(())
    }
}

/// Per-sample task loss as an `n×1` column.
pub fn task_loss_per_sample<T: Scalar>(g: &Graph<T>, kind: TaskLossKind, y: Var, f: Var) -> Var {
    let (_, c) = g.shape(y);
    let inv_c = T::one() / T::of(c as f64);
    let delta = T::of(PROB_CLAMP);
    match kind {
        TaskLossKind::Mse => g.scale(g.sum_cols(g.square(g.sub(f, y))), inv_c),
        TaskLossKind::Bce => {
            let ln_f = g.ln(g.clamp_min(f, delta));
            let ln_1mf = g.ln(g.clamp_min(g.shift(g.neg(f), T::one()), delta));
            let one_my = g.shift(g.neg(y), T::one());
            let ll = g.add(g.mul(y, ln_f), g.mul(one_my, ln_1mf));
            g.scale(g.sum_cols(ll), -inv_c)
        }
        TaskLossKind::Cce => {
            let ln_f = g.ln(g.clamp_min(f, delta));
            g.neg(g.sum_cols(g.mul(y, ln_f)))
        }
    }
}

pub fn task_loss_graph<T: Scalar>(g: &Graph<T>, kind: TaskLossKind, y: Var, f: Var) -> Var {
    let per = task_loss_per_sample(g, kind, y, f);
    g.mean(per)
}

fn check_pair<T: Scalar>(y: &Tensor<T>, f: &Tensor<T>) -> Result<()> {
    if y.shape() != f.shape() {
        return Err(Error::Contract(format!(
            "label batch {:?} and prediction batch {:?} differ in shape",
            y.shape(),
            f.shape()
        )));
    }
    if y.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    Ok(())
}

pub fn task_loss<T: Scalar>(kind: TaskLossKind, y: &Tensor<T>, f: &Tensor<T>) -> Result<T> {
    check_pair(y, f)?;
    let g = Graph::new();
    g.set_recording(false);
    let out = task_loss_graph(&g, kind, g.constant(y.clone()), g.constant(f.clone()));
    Ok(g.item(out))
}

/// MSE over all entries, or the fraction of rows whose predicted class
/// differs from the labelled one (argmax with ties to the lower index; a
/// single output is thresholded at 0.5).
pub fn performance_metric<T: Scalar>(kind: MetricKind, y: &Tensor<T>, f: &Tensor<T>) -> Result<T> {
    check_pair(y, f)?;
    match kind {
        MetricKind::Mse => {
            let total: T = y
                .data()
                .iter()
                .zip(f.data())
                .map(|(&a, &b)| (b - a) * (b - a))
                .sum();
            Ok(total / T::of(y.len() as f64))
        }
        MetricKind::ErrorRate => {
            let wrong = if y.cols() == 1 {
                let half = T::of(0.5);
                y.data()
                    .iter()
                    .zip(f.data())
                    .filter(|(&a, &b)| (a > half) != (b > half))
                    .count()
            } else {
                let (ly, lf) = (y.argmax_rows(), f.argmax_rows());
                ly.iter().zip(&lf).filter(|(a, b)| a != b).count()
            };
            Ok(T::of(wrong as f64 / y.rows() as f64))
        }
    }
}
