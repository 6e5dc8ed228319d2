//! Robust (c+1)-output training with the importance-reweighted risk, the
//! forward-corrected and plain cross-entropy baselines, and closed-class prediction.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::{fit, ClassifierParams, EpochRecord, Objective, SplitView, TrainConfig};
use crate::objective::{LossKind, WeightGradient, DEFAULT_EPSILON};
use crate::synthdata::{Dataset, Split};
use crate::transition::{revise, RevisionConfig, TransitionBundle};

pub use crate::objective::{forward_loss, importance_weight, reweighted_loss};

/// Largest denominator floor accepted.
pub const MAX_EPSILON: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RobustConfig {
    pub objective: LossKind,
    pub train: TrainConfig,
    /// Floor on `(Tᵀg)_ỹ`.
    pub epsilon: f64,
    pub weight_gradient: WeightGradient,
    /// Slack revision run after the initial robust fit.
    pub revise: Option<RevisionConfig>,
    /// Start from the warmup model's hidden layers (fresh output layer).
    pub warm_start: bool,
}

impl Default for RobustConfig {
    fn default() -> Self {
        RobustConfig {
            objective: LossKind::Reweighted,
            train: TrainConfig::default(),
            epsilon: DEFAULT_EPSILON,
            weight_gradient: WeightGradient::StopGradient,
            revise: None,
            warm_start: false,
        }
    }
}

impl RobustConfig {
    pub fn validate(&self, bundle: Option<&TransitionBundle>) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon <= MAX_EPSILON) {
            return Err(Error::config(format!("epsilon must lie in (0, {MAX_EPSILON}]")));
        }
        if self.objective.needs_matrix() && bundle.is_none() {
            return Err(Error::config(format!("{} objective needs a transition bundle", self.objective)));
        }
        if self.revise.is_some() && !self.objective.needs_matrix() {
            return Err(Error::config("revision needs a transition-aware objective"));
        }
        self.train.validate()
    }
}

#[derive(Debug, Clone)]
pub struct RobustOutcome {
    pub params: ClassifierParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Bundle the final model was trained against (revised when revision ran).
    pub bundle: Option<TransitionBundle>,
}

/// Trains a fresh `(c+1)`-output network on the noisy train split. Each
/// example uses the matrix of its nearest coarse centroid, routed in the frozen
/// warmup model's space.
pub fn train_robust(
    data: &Dataset,
    bundle: Option<&TransitionBundle>,
    warmup: Option<&ClassifierParams>,
    cfg: &RobustConfig,
) -> Result<RobustOutcome> {
    cfg.validate(bundle)?;
    let train = SplitView::noisy(data, Split::Train);
    if train.idx.is_empty() {
        return Err(Error::config("empty training split"));
    }
    let val = SplitView::noisy(data, Split::Val);
    let (objective, train_routes, val_routes) = match (cfg.objective.needs_matrix(), bundle) {
        (true, Some(b)) => {
            b.validate()?;
            if b.c() != data.c {
                return Err(Error::shape(format!("bundle is for {} classes, data has {}", b.c(), data.c)));
            }
            let objective = Objective {
                kind: cfg.objective,
                matrices: b.matrices.clone(),
                epsilon: cfg.epsilon,
                weight_gradient: cfg.weight_gradient,
            };
            (objective, Some(b.routes(warmup, train.features.view())?), Some(b.routes(warmup, val.features.view())?))
        }
        _ => (
            Objective {
                epsilon: cfg.epsilon,
                ..Objective::ce()
            },
            None,
            None,
        ),
    };
    let mut params = ClassifierParams::init(
        &cfg.train.layer_sizes(data.d(), data.c + 1),
        cfg.train.activation,
        cfg.train.seed,
    )?;
    if cfg.warm_start {
        let body = warmup.ok_or_else(|| Error::config("warm start needs the warmup model"))?;
        let sizes = params.sizes();
        let body_sizes = body.sizes();
        if body_sizes[..body_sizes.len() - 1] != sizes[..sizes.len() - 1] || body.activation != params.activation {
            return Err(Error::config("warm start needs the warmup model's hidden layout"));
        }
        let hidden = params.layers.len() - 1;
        params.layers[..hidden].clone_from_slice(&body.layers[..hidden]);
    }
    let outcome = fit(
        params,
        &train.as_train_set(train_routes.as_deref()),
        &val.as_train_set(val_routes.as_deref()),
        &objective,
        &cfg.train,
    )?;
    let (params, bundle) = match (&cfg.revise, bundle) {
        (Some(rc), Some(b)) => {
            let rev = revise(b, &outcome.params, &train.as_train_set(train_routes.as_deref()), rc)?;
            (rev.params, Some(rev.bundle))
        }
        _ => (outcome.params, bundle.cloned()),
    };
    Ok(RobustOutcome {
        params,
        history: outcome.history,
        best_epoch: outcome.best_epoch,
        bundle,
    })
}

/// Index of the largest of the first `c` entries of `g`; ties go to the lowest index.
pub fn argmax_closed(g: &[f64], c: usize) -> Result<usize> {
    if c == 0 || g.len() != c + 1 {
        return Err(Error::shape(format!("expected {} outputs, got {}", c + 1, g.len())));
    }
    let mut best = 0;
    for j in 1..c {
        if g[j] > g[best] {
            best = j;
        }
    }
    Ok(best)
}

/// Closed-class prediction for one input; the meta output is never predicted.
pub fn predict(params: &ClassifierParams, x: ArrayView1<f64>) -> Result<usize> {
    let out = params.out_dim();
    if out < 2 {
        return Err(Error::shape("prediction needs a (c+1)-output network"));
    }
    argmax_closed(&params.forward(x)?.probs, out - 1)
}

pub fn predict_batch(params: &ClassifierParams, x: ArrayView2<f64>) -> Result<Vec<usize>> {
    let out = params.out_dim();
    if out < 2 {
        return Err(Error::shape("prediction needs a (c+1)-output network"));
    }
    let probs = params.predict_proba(x)?;
    probs
        .rows()
        .into_iter()
        .map(|r| argmax_closed(r.as_slice().expect("standard layout"), out - 1))
        .collect()
}

/// Test-split predictions: `(dataset index, predicted, clean label)`.
pub fn predict_split(params: &ClassifierParams, data: &Dataset, split: Split) -> Result<Vec<(usize, usize, usize)>> {
    let idx = data.indices(split);
    let preds = predict_batch(params, data.rows(&idx).view())?;
    Ok(idx
        .iter()
        .zip(preds)
        .map(|(&i, p)| (i, p, data.clean_labels[i]))
        .collect())
}
