//! Feed-forward classifier with a softmax head and hand-written backprop.
//!
//! Layers are stored as `(weights, bias)` with `weights` shaped `in × out`, so a
//! batch `X` (rows are examples) maps to `X·W + b`. The post-activation output
//! of the last hidden layer doubles as the deep representation used for
//! clustering.

use std::fmt;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Checkpoint, Error, Result};
use crate::objective::{self, LossKind, WeightGradient, DEFAULT_EPSILON};
use crate::rng::{stream_rng, streams};
use crate::synthdata::{Dataset, Split};
use crate::transition::ExtendedTransitionMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Relu,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-z).exp()),
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "LayerRepr", into = "LayerRepr")]
pub struct Layer {
    /// `in × out`.
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            weights: Array2::zeros(self.weights.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ParamsRepr", into = "ParamsRepr")]
pub struct ClassifierParams {
    pub layers: Vec<Layer>,
    pub activation: Activation,
}

/// Weights as nested `in × out` arrays.
#[derive(Serialize, Deserialize)]
struct LayerRepr {
    weights: Vec<Vec<f64>>,
    bias: Vec<f64>,
}

impl TryFrom<LayerRepr> for Layer {
    type Error = Error;

    fn try_from(r: LayerRepr) -> Result<Self> {
        let rows = r.weights.len();
        let cols = r.weights.first().map_or(0, Vec::len);
        if r.weights.iter().any(|w| w.len() != cols) || cols != r.bias.len() {
            return Err(Error::shape("layer weights and bias disagree"));
        }
        let flat: Vec<f64> = r.weights.into_iter().flatten().collect();
        Ok(Layer {
            weights: Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::shape(e.to_string()))?,
            bias: Array1::from(r.bias),
        })
    }
}

impl From<Layer> for LayerRepr {
    fn from(l: Layer) -> Self {
        LayerRepr {
            weights: l.weights.rows().into_iter().map(|r| r.to_vec()).collect(),
            bias: l.bias.to_vec(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ParamsRepr {
    sizes: Vec<usize>,
    activation: Activation,
    layers: Vec<Layer>,
}

impl TryFrom<ParamsRepr> for ClassifierParams {
    type Error = Error;

    fn try_from(r: ParamsRepr) -> Result<Self> {
        let params = ClassifierParams::from_layers(r.layers, r.activation)?;
        if params.sizes() != r.sizes {
            return Err(Error::shape(format!("declared sizes {:?} do not match the layers", r.sizes)));
        }
        Ok(params)
    }
}

impl From<ClassifierParams> for ParamsRepr {
    fn from(p: ClassifierParams) -> Self {
        ParamsRepr {
            sizes: p.sizes(),
            activation: p.activation,
            layers: p.layers,
        }
    }
}

/// Gradients share the parameter layout.
pub type Gradients = ClassifierParams;

/// Output of a single-example forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Forward {
    pub probs: Vec<f64>,
    pub hidden: Vec<f64>,
}

struct Trace {
    /// Inputs to each layer: `inputs[0] = X`, `inputs[l]` = post-activation of layer `l-1`.
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Array2<f64>>,
    probs: Array2<f64>,
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row /= s;
    }
    logits
}

impl ClassifierParams {
    /// Random initialization for layer sizes `[in, hidden.., out]`: He-uniform for
    /// ReLU, Glorot-uniform for sigmoid; zero biases.
    pub fn init(sizes: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if sizes.len() < 2 || sizes.contains(&0) {
            return Err(Error::config(format!("invalid layer sizes {sizes:?}")));
        }
        let mut rng = stream_rng(seed, streams::INIT);
        let layers = sizes
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = match activation {
                    Activation::Relu => (6.0 / fan_in as f64).sqrt(),
                    Activation::Sigmoid => (6.0 / (fan_in + fan_out) as f64).sqrt(),
                };
                let weights = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
                Layer {
                    weights,
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(ClassifierParams { layers, activation })
    }

    pub fn from_layers(layers: Vec<Layer>, activation: Activation) -> Result<Self> {
        let p = ClassifierParams { layers, activation };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::shape("network has no layers"));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weights.ncols() != layer.bias.len() {
                return Err(Error::shape(format!("layer {l}: bias length disagrees with weights")));
            }
            if l > 0 && self.layers[l - 1].weights.ncols() != layer.weights.nrows() {
                return Err(Error::shape(format!("layer {l}: input width disagrees with layer {}", l - 1)));
            }
            if layer.weights.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::shape(format!("layer {l}: non-finite parameter")));
            }
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].weights.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty").weights.ncols()
    }

    pub fn sizes(&self) -> Vec<usize> {
        std::iter::once(self.in_dim())
            .chain(self.layers.iter().map(|l| l.weights.ncols()))
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    pub fn zeros_like(&self) -> Gradients {
        ClassifierParams {
            layers: self.layers.iter().map(Layer::zeros_like).collect(),
            activation: self.activation,
        }
    }

    /// Flat view over every parameter (weights row-major, then bias, per layer).
    pub fn flat(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.weights.iter().chain(l.bias.iter()).copied())
            .collect()
    }

    fn param_mut(&mut self, mut idx: usize) -> &mut f64 {
        for layer in &mut self.layers {
            let nw = layer.weights.len();
            if idx < nw {
                let cols = layer.weights.ncols();
                return &mut layer.weights[[idx / cols, idx % cols]];
            }
            idx -= nw;
            if idx < layer.bias.len() {
                return &mut layer.bias[idx];
            }
            idx -= layer.bias.len();
        }
        panic!("parameter index out of range");
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::shape(format!(
                "input dimension {cols}, network expects {}",
                self.in_dim()
            )));
        }
        Ok(())
    }

    fn trace(&self, x: ArrayView2<f64>) -> Trace {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut current = x.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = current.dot(&layer.weights) + &layer.bias;
            inputs.push(current);
            if l == last {
                return Trace {
                    inputs,
                    pre,
                    probs: softmax_rows(z),
                };
            }
            let act = self.activation;
            current = z.mapv(|v| act.apply(v));
            pre.push(z);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Softmax probabilities and representation for one example.
    pub fn forward(&self, x: ArrayView1<f64>) -> Result<Forward> {
        self.check_input(x.len())?;
        let batch = x.insert_axis(Axis(0));
        let trace = self.trace(batch);
        let hidden = trace.inputs.last().expect("one input per layer").row(0).to_vec();
        Ok(Forward {
            probs: trace.probs.row(0).to_vec(),
            hidden,
        })
    }

    /// Softmax probabilities for a batch.
    pub fn predict_proba(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        Ok(self.trace(x).probs)
    }

    /// Deep representations (post-activation of the last hidden layer) for a batch.
    pub fn representations(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(x.ncols())?;
        let mut current = x.to_owned();
        for layer in &self.layers[..self.layers.len() - 1] {
            let act = self.activation;
            current = (current.dot(&layer.weights) + &layer.bias).mapv(|v| act.apply(v));
        }
        Ok(current)
    }

    fn backprop(&self, trace: &Trace, mut delta: Array2<f64>) -> Gradients {
        let mut grads = self.zeros_like();
        for l in (0..self.layers.len()).rev() {
            grads.layers[l].weights = trace.inputs[l].t().dot(&delta);
            grads.layers[l].bias = delta.sum_axis(Axis(0));
            if l == 0 {
                break;
            }
            let mut upstream = delta.dot(&self.layers[l].weights.t());
            let act = self.activation;
            Zip::from(&mut upstream)
                .and(&trace.pre[l - 1])
                .and(&trace.inputs[l])
                .for_each(|d, &z, &a| *d *= act.derivative(z, a));
            delta = upstream;
        }
        grads
    }
}

/// Loss selection plus everything the transition-aware losses need.
#[derive(Debug, Clone)]
pub struct Objective {
    pub kind: LossKind,
    /// Matrices an example can be routed to (empty for plain cross-entropy).
    pub matrices: Vec<ExtendedTransitionMatrix>,
    pub epsilon: f64,
    pub weight_gradient: WeightGradient,
}

impl Objective {
    pub fn ce() -> Self {
        Objective {
            kind: LossKind::Ce,
            matrices: Vec::new(),
            epsilon: DEFAULT_EPSILON,
            weight_gradient: WeightGradient::StopGradient,
        }
    }

    pub fn with_matrices(kind: LossKind, matrices: Vec<ExtendedTransitionMatrix>, epsilon: f64) -> Self {
        Objective {
            kind,
            matrices,
            epsilon,
            weight_gradient: WeightGradient::StopGradient,
        }
    }

    pub fn validate(&self, out_dim: usize) -> Result<()> {
        if self.kind.needs_matrix() {
            if self.matrices.is_empty() {
                return Err(Error::config(format!("{} loss needs at least one transition matrix", self.kind)));
            }
            if let Some(t) = self.matrices.iter().find(|t| t.c() + 1 != out_dim) {
                return Err(Error::shape(format!(
                    "{}-output network paired with a {}-class transition matrix",
                    out_dim,
                    t.c()
                )));
            }
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("epsilon must be positive"));
        }
        Ok(())
    }

    fn matrix(&self, route: usize) -> Option<&ExtendedTransitionMatrix> {
        if self.kind.needs_matrix() {
            self.matrices.get(route)
        } else {
            None
        }
    }
}

/// Aggregate of a batched loss evaluation.
#[derive(Debug, Clone)]
pub struct BatchLoss {
    /// Mean loss over the batch.
    pub loss: f64,
    /// Number of examples whose probability floor was active.
    pub floored: usize,
}

/// Per-example route into `Objective::matrices`; `None` sends every example to matrix 0.
pub type Routes<'a> = Option<&'a [usize]>;

fn route_of(routes: Routes<'_>, i: usize) -> usize {
    routes.map_or(0, |r| r[i])
}

fn check_batch(params: &ClassifierParams, x: ArrayView2<f64>, labels: &[usize], routes: Routes<'_>) -> Result<()> {
    params.check_input(x.ncols())?;
    if labels.len() != x.nrows() || routes.is_some_and(|r| r.len() != x.nrows()) {
        return Err(Error::shape("batch features, labels and routes differ in length"));
    }
    Ok(())
}

/// Mean loss over a batch without gradients.
pub fn batch_loss(
    params: &ClassifierParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    objective: &Objective,
    routes: Routes<'_>,
) -> Result<BatchLoss> {
    check_batch(params, x, labels, routes)?;
    let probs = params.predict_proba(x)?;
    let mut total = 0.0;
    let mut floored = 0;
    for (i, row) in probs.rows().into_iter().enumerate() {
        let eval = objective::evaluate(
            objective.kind,
            row.as_slice().expect("standard layout"),
            labels[i],
            objective.matrix(route_of(routes, i)),
            objective.epsilon,
            objective.weight_gradient,
        )?;
        total += eval.loss;
        floored += eval.floored as usize;
    }
    Ok(BatchLoss {
        loss: total / x.nrows().max(1) as f64,
        floored,
    })
}

/// Mean loss and exact gradients over a batch.
pub fn loss_and_grad(
    params: &ClassifierParams,
    x: ArrayView2<f64>,
    labels: &[usize],
    objective: &Objective,
    routes: Routes<'_>,
) -> Result<(BatchLoss, Gradients)> {
    check_batch(params, x, labels, routes)?;
    let trace = params.trace(x);
    let b = x.nrows().max(1) as f64;
    let mut delta = Array2::<f64>::zeros(trace.probs.raw_dim());
    let mut total = 0.0;
    let mut floored = 0;
    for (i, g) in trace.probs.rows().into_iter().enumerate() {
        let g = g.as_slice().expect("standard layout");
        let eval = objective::evaluate(
            objective.kind,
            g,
            labels[i],
            objective.matrix(route_of(routes, i)),
            objective.epsilon,
            objective.weight_gradient,
        )?;
        total += eval.loss;
        floored += eval.floored as usize;
        // chain through softmax: dz_j = g_j (a_j − Σ_k a_k g_k)
        let dot: f64 = eval.grad_output.iter().zip(g).map(|(a, p)| a * p).sum();
        for (j, d) in delta.row_mut(i).iter_mut().enumerate() {
            *d = g[j] * (eval.grad_output[j] - dot) / b;
        }
    }
    let grads = params.backprop(&trace, delta);
    Ok((
        BatchLoss {
            loss: total / b,
            floored,
        },
        grads,
    ))
}

/// Exact gradient of one example's loss.
pub fn backward(
    params: &ClassifierParams,
    x: ArrayView1<f64>,
    label: usize,
    objective: &Objective,
    route: usize,
) -> Result<Gradients> {
    let routes = [route];
    let (_, grads) = loss_and_grad(params, x.insert_axis(Axis(0)), &[label], objective, Some(&routes))?;
    Ok(grads)
}

fn example_loss(
    params: &ClassifierParams,
    x: ArrayView1<f64>,
    label: usize,
    objective: &Objective,
    route: usize,
    frozen_weight: Option<f64>,
) -> Result<f64> {
    let probs = params.forward(x)?.probs;
    let matrix = objective.matrix(route);
    match frozen_weight {
        Some(w) => {
            let t = matrix.expect("frozen weights only apply to the reweighted losses");
            Ok(w * match objective.kind {
                LossKind::ReweightedMapped => objective::forward_loss(&probs, label, t, objective.epsilon)?,
                _ => objective::ce_loss(&probs, label)?,
            })
        }
        None => Ok(objective::evaluate(
            objective.kind,
            &probs,
            label,
            matrix,
            objective.epsilon,
            objective.weight_gradient,
        )?
        .loss),
    }
}

/// Relative error `|a − b| / max(|a|, |b|, GRAD_CHECK_FLOOR)` used by [`grad_check`].
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;

/// Step of the fourth-order central difference used by [`grad_check`].
pub const GRAD_CHECK_STEP: f64 = 1e-3;

/// Largest relative error between analytic and central-difference gradients of
/// one example's loss. Under [`WeightGradient::StopGradient`] the importance
/// weight is frozen at its value for `params`, matching the analytic gradient.
pub fn grad_check(
    params: &ClassifierParams,
    x: ArrayView1<f64>,
    label: usize,
    objective: &Objective,
    route: usize,
) -> Result<f64> {
    let analytic = backward(params, x, label, objective, route)?.flat();
    let reweighted = matches!(objective.kind, LossKind::Reweighted | LossKind::ReweightedMapped);
    let frozen = if reweighted && objective.weight_gradient == WeightGradient::StopGradient {
        let probs = params.forward(x)?.probs;
        let t = objective.matrix(route).ok_or_else(|| Error::config("reweighted loss needs a matrix"))?;
        Some(objective::importance_weight(&probs, label, t, objective.epsilon)?)
    } else {
        None
    };
    let mut probe = params.clone();
    let mut worst: f64 = 0.0;
    for (idx, &a) in analytic.iter().enumerate() {
        let original = *probe.param_mut(idx);
        let mut at = |k: f64| -> Result<f64> {
            *probe.param_mut(idx) = original + k * GRAD_CHECK_STEP;
            example_loss(&probe, x, label, objective, route, frozen)
        };
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        *probe.param_mut(idx) = original;
        let numeric = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * GRAD_CHECK_STEP);
        let denom = a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    Sgd,
    Adam,
}

fn default_hidden() -> Vec<usize> {
    vec![32, 32]
}

/// Optimization settings for one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// `(epoch, divisor)`: from `epoch` on (0-based) the rate is divided by `divisor`; cumulative.
    #[serde(default)]
    pub lr_schedule: Vec<(usize, f64)>,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: 60 epochs, SGD with momentum 0.9, rate 0.01 divided
    /// by 10 at 40% and 80% of the budget.
    fn default() -> Self {
        TrainConfig::scheduled(0.01, 60, 128, 0)
    }
}

impl TrainConfig {
    /// SGD with momentum 0.9, weight decay 5e-4 and ÷10 drops at 40%/80% of `epochs`.
    pub fn scheduled(learning_rate: f64, epochs: usize, batch_size: usize, seed: u64) -> Self {
        TrainConfig {
            learning_rate,
            lr_schedule: vec![(epochs * 2 / 5, 10.0), (epochs * 4 / 5, 10.0)],
            epochs,
            batch_size,
            weight_decay: 5e-4,
            momentum: 0.9,
            seed,
            optimizer: OptimizerKind::Sgd,
            hidden: default_hidden(),
            activation: Activation::Relu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::config("epochs must be at least 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if self.lr_schedule.iter().any(|&(_, d)| !(d > 0.0)) {
            return Err(Error::config("learning-rate divisors must be positive"));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr_schedule
            .iter()
            .filter(|&&(e, _)| epoch >= e)
            .fold(self.learning_rate, |lr, &(_, d)| lr / d)
    }

    pub fn layer_sizes(&self, in_dim: usize, out_dim: usize) -> Vec<usize> {
        std::iter::once(in_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(out_dim))
            .collect()
    }
}

/// Stateful first-order optimizer over a parameter set.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    momentum: f64,
    weight_decay: f64,
    first: Gradients,
    second: Gradients,
    step: i32,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, like: &ClassifierParams, momentum: f64, weight_decay: f64) -> Self {
        Optimizer {
            kind,
            momentum,
            weight_decay,
            first: like.zeros_like(),
            second: like.zeros_like(),
            step: 0,
        }
    }

    /// One update; weight decay applies to weights only.
    pub fn step(&mut self, params: &mut ClassifierParams, grads: &Gradients, lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        for (l, layer) in params.layers.iter_mut().enumerate() {
            let g = &grads.layers[l];
            let wd = self.weight_decay;
            let update = |p: &mut f64, gv: f64, m: &mut f64, v: &mut f64, decay: f64, kind: OptimizerKind, mom: f64| {
                let gv = gv + decay * *p;
                match kind {
                    OptimizerKind::Sgd => {
                        *m = mom * *m + gv;
                        *p -= lr * *m;
                    }
                    OptimizerKind::Adam => {
                        *m = b1 * *m + (1.0 - b1) * gv;
                        *v = b2 * *v + (1.0 - b2) * gv * gv;
                        *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                    }
                }
            };
            let (kind, mom) = (self.kind, self.momentum);
            Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut self.first.layers[l].weights)
                .and(&mut self.second.layers[l].weights)
                .for_each(|p, &gv, m, v| update(p, gv, m, v, wd, kind, mom));
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut self.first.layers[l].bias)
                .and(&mut self.second.layers[l].bias)
                .for_each(|p, &gv, m, v| update(p, gv, m, v, 0.0, kind, mom));
        }
    }
}

/// One row of a training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Fraction of train examples whose probability floor was active.
    pub floor_rate: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the selected epoch.
    pub params: ClassifierParams,
    pub history: Vec<EpochRecord>,
    /// Epoch whose checkpoint was kept (lowest validation objective).
    pub best_epoch: usize,
}

/// Labeled examples a trainer iterates over.
pub struct TrainSet<'a> {
    pub features: ArrayView2<'a, f64>,
    pub labels: &'a [usize],
    pub routes: Option<&'a [usize]>,
}

/// Mini-batch training of `params` on `train`, keeping the checkpoint with the
/// lowest objective on `val` (or the last one when `val` is empty).
pub fn fit(
    mut params: ClassifierParams,
    train: &TrainSet<'_>,
    val: &TrainSet<'_>,
    objective: &Objective,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    objective.validate(params.out_dim())?;
    let n = train.labels.len();
    if n == 0 {
        return Err(Error::config("empty training split"));
    }
    let mut rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut opt = Optimizer::new(cfg.optimizer, &params, cfg.momentum, cfg.weight_decay);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ClassifierParams)> = None;

    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let routes: Option<Vec<usize>> = train.routes.map(|r| chunk.iter().map(|&i| r[i]).collect());
            let (batch, grads) = loss_and_grad(&params, x.view(), &labels, objective, routes.as_deref())?;
            if !batch.loss.is_finite() {
                return Err(divergence(epoch, best, params));
            }
            opt.step(&mut params, &grads, lr);
        }
        let train_eval = batch_loss(&params, train.features, train.labels, objective, train.routes)?;
        let val_loss = if val.labels.is_empty() {
            train_eval.loss
        } else {
            batch_loss(&params, val.features, val.labels, objective, val.routes)?.loss
        };
        if !train_eval.loss.is_finite() || !val_loss.is_finite() || params.validate().is_err() {
            return Err(divergence(epoch, best, params));
        }
        history.push(EpochRecord {
            epoch,
            train_loss: train_eval.loss,
            val_loss,
            floor_rate: train_eval.floored as f64 / n as f64,
            lr,
        });
        let select = if val.labels.is_empty() {
            true
        } else {
            best.as_ref().is_none_or(|(b, _, _)| val_loss < *b)
        };
        if select {
            best = Some((val_loss, epoch, params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        params,
        history,
        best_epoch,
    })
}

fn divergence(epoch: usize, best: Option<(f64, usize, ClassifierParams)>, current: ClassifierParams) -> Error {
    let last = best.map(|b| b.2).unwrap_or(current);
    Error::Divergence {
        epoch,
        last_stable: Box::new(Checkpoint::Params(last)),
    }
}

/// Indices, features and labels of one split, for building a [`TrainSet`].
pub struct SplitView {
    pub idx: Vec<usize>,
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
}

impl SplitView {
    pub fn noisy(data: &Dataset, split: Split) -> Self {
        let idx = data.indices(split);
        let features = data.rows(&idx);
        let labels = idx.iter().map(|&i| data.noisy_labels[i]).collect();
        SplitView { idx, features, labels }
    }

    pub fn as_train_set<'a>(&'a self, routes: Option<&'a [usize]>) -> TrainSet<'a> {
        TrainSet {
            features: self.features.view(),
            labels: &self.labels,
            routes,
        }
    }
}

/// Trains the c-output model on noisy labels with cross-entropy; the checkpoint
/// with the lowest noisy-validation loss is returned.
pub fn train_warmup(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train = SplitView::noisy(data, Split::Train);
    if train.idx.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let val = SplitView::noisy(data, Split::Val);
    let params = ClassifierParams::init(&cfg.layer_sizes(data.d(), data.c), cfg.activation, cfg.seed)?;
    fit(params, &train.as_train_set(None), &val.as_train_set(None), &Objective::ce(), cfg)
}

/// Something that yields estimated noisy-class posteriors `P(Ỹ | x)`.
pub trait PosteriorModel {
    /// Number of noisy classes.
    fn classes(&self) -> usize;

    fn noisy_posterior(&self, x: ArrayView1<f64>) -> Vec<f64>;

    fn noisy_posteriors(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((xs.nrows(), self.classes()));
        for (i, x) in xs.rows().into_iter().enumerate() {
            out.row_mut(i).assign(&Array1::from(self.noisy_posterior(x)));
        }
        out
    }
}

impl PosteriorModel for ClassifierParams {
    fn classes(&self) -> usize {
        self.out_dim()
    }

    fn noisy_posterior(&self, x: ArrayView1<f64>) -> Vec<f64> {
        self.forward(x).expect("input dimension matches the network").probs
    }

    fn noisy_posteriors(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        self.predict_proba(xs).expect("input dimension matches the network")
    }
}

impl fmt::Display for ClassifierParams {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let sizes: Vec<String> = self.sizes().iter().map(|s| s.to_string()).collect();
        write!(f, "{} ({:?})", sizes.join("-"), self.activation)
    }
}
