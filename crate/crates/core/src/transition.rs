//! Extended transition matrices `T* ∈ [0,1]^{(c+1)×c}`, their anchor-based
//! estimation, the cluster-dependent variant, and slack revision.
//!
//! Rows `0..c` hold the closed-set flip law `P(Ỹ = j | Y = i)`; row `c` holds the
//! meta-class row `P(Ỹ = j | Y = meta)`. At an anchor point of row `i` the noisy
//! posterior equals row `i`, so each row is read off the estimated noisy
//! posteriors of that row's anchors.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::clusterkit::{
    self, closed_anchor_rows, detect_meta_anchors, AnchorRow, AnchorSet, AnchorSource, ClusterModel, MatchRule, MetaRule,
};
use crate::error::{Checkpoint, Error, Result};
use crate::netcore::{ClassifierParams, Objective, Optimizer, OptimizerKind, PosteriorModel, TrainSet};
use crate::objective::{LossKind, WeightGradient, DEFAULT_EPSILON, PROB_FLOOR};
use crate::rng::{stream_rng, streams};
use crate::synthdata::{Dataset, Split};

/// Row sums must be within this of 1.
pub const ROW_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    True,
    Estimated,
    Revised,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRepr", into = "MatrixRepr")]
pub struct ExtendedTransitionMatrix {
    entries: Array2<f64>,
    origin: Origin,
    cluster_id: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cluster_id: Option<usize>,
    origin: Origin,
    entries: Vec<Vec<f64>>,
}

impl TryFrom<MatrixRepr> for ExtendedTransitionMatrix {
    type Error = Error;

    fn try_from(r: MatrixRepr) -> Result<Self> {
        let rows = r.entries.len();
        let cols = r.entries.first().map_or(0, Vec::len);
        if r.entries.iter().any(|row| row.len() != cols) {
            return Err(Error::shape("ragged transition matrix"));
        }
        let flat: Vec<f64> = r.entries.into_iter().flatten().collect();
        let entries = Array2::from_shape_vec((rows, cols), flat).map_err(|e| Error::shape(e.to_string()))?;
        Ok(ExtendedTransitionMatrix::new(entries, r.origin)?.with_cluster(r.cluster_id))
    }
}

impl From<ExtendedTransitionMatrix> for MatrixRepr {
    fn from(t: ExtendedTransitionMatrix) -> Self {
        MatrixRepr {
            cluster_id: t.cluster_id,
            origin: t.origin,
            entries: t.entries.rows().into_iter().map(|r| r.to_vec()).collect(),
        }
    }
}

impl ExtendedTransitionMatrix {
    pub fn new(entries: Array2<f64>, origin: Origin) -> Result<Self> {
        let (rows, cols) = entries.dim();
        if cols == 0 || rows != cols + 1 {
            return Err(Error::shape(format!("extended matrix must be (c+1)×c, got {rows}×{cols}")));
        }
        if let Some(v) = entries.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::shape(format!("transition entry {v} outside [0, 1]")));
        }
        for (i, row) in entries.rows().into_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::shape(format!("row {i} sums to {s}")));
            }
        }
        Ok(ExtendedTransitionMatrix {
            entries,
            origin,
            cluster_id: None,
        })
    }

    pub fn with_cluster(mut self, cluster_id: Option<usize>) -> Self {
        self.cluster_id = cluster_id;
        self
    }

    pub fn with_origin(mut self, origin: Origin) -> Self {
        self.origin = origin;
        self
    }

    /// Stacks the closed-set rows over the meta row.
    pub fn from_rows(rows: &[Vec<f64>], origin: Origin) -> Result<Self> {
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != c) {
            return Err(Error::shape("rows of unequal length"));
        }
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let entries = Array2::from_shape_vec((rows.len(), c), flat).map_err(|e| Error::shape(e.to_string()))?;
        ExtendedTransitionMatrix::new(entries, origin)
    }

    pub fn c(&self) -> usize {
        self.entries.ncols()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    pub fn origin(&self) -> Origin {
        self.origin
    }

    pub fn cluster_id(&self) -> Option<usize> {
        self.cluster_id
    }

    /// The c×c closed-set block `T`.
    pub fn closed_block(&self) -> ArrayView2<'_, f64> {
        self.entries.slice(ndarray::s![..self.c(), ..])
    }

    /// The meta row `T°`.
    pub fn meta_row(&self) -> Vec<f64> {
        self.entries.row(self.c()).to_vec()
    }

    pub fn max_row_deviation(&self) -> f64 {
        self.entries
            .rows()
            .into_iter()
            .map(|r| (r.sum() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// `Tᵀg`: the noisy posterior implied by a clean posterior over `c + 1` classes.
    pub fn noisy_posterior(&self, g: &[f64]) -> Result<Vec<f64>> {
        if g.len() != self.c() + 1 {
            return Err(Error::shape(format!(
                "clean posterior of length {} for a {}-class matrix",
                g.len(),
                self.c()
            )));
        }
        Ok((0..self.c())
            .map(|j| g.iter().enumerate().map(|(k, gk)| gk * self.entries[[k, j]]).sum())
            .collect())
    }
}

/// `Tᵀg` (free-function form).
pub fn noisy_posterior(t: &ExtendedTransitionMatrix, g: &[f64]) -> Result<Vec<f64>> {
    t.noisy_posterior(g)
}

/// Total entrywise absolute difference.
pub fn l1_error(estimate: &ExtendedTransitionMatrix, truth: &ExtendedTransitionMatrix) -> Result<f64> {
    l1_distance(estimate.entries().view(), truth.entries().view())
}

/// Entrywise ℓ1 distance between equally shaped blocks.
pub fn l1_distance(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("cannot compare {:?} with {:?}", a.dim(), b.dim())));
    }
    Ok(a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum())
}

/// Mean of the anchors' noisy posteriors, renormalized to sum to one.
pub fn estimate_row(row: &AnchorRow) -> Result<Vec<f64>> {
    let first = row.posteriors.first().ok_or_else(|| Error::AnchorShortage {
        row: "row".into(),
        detail: "no anchors".into(),
    })?;
    let mut mean = vec![0.0; first.len()];
    for p in &row.posteriors {
        if p.len() != mean.len() {
            return Err(Error::shape("anchor posteriors of unequal length"));
        }
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let total: f64 = mean.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Degenerate("anchor posteriors sum to zero".into()));
    }
    Ok(mean.into_iter().map(|m| m / total).collect())
}

/// Space the clustering runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSpace {
    /// Post-activation output of the warmup model's last hidden layer.
    #[default]
    Representation,
    /// Input features as-is.
    Raw,
}

impl FeatureSpace {
    pub fn project(self, warmup: Option<&ClassifierParams>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        match self {
            FeatureSpace::Raw => Ok(x.to_owned()),
            FeatureSpace::Representation => warmup
                .ok_or_else(|| Error::config("representation space needs the warmup model"))?
                .representations(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimationConfig {
    /// Percentile of the class posterior at which closed-set anchors are taken.
    pub percentile: f64,
    /// Anchors averaged per row.
    pub anchors: usize,
    pub matching: MatchRule,
    pub meta_rule: MetaRule,
    pub space: FeatureSpace,
    pub kmeans_restarts: usize,
    pub kmeans_max_iters: usize,
    pub seed: u64,
}

impl Default for EstimationConfig {
    fn default() -> Self {
        EstimationConfig {
            percentile: 97.0,
            anchors: 5,
            matching: MatchRule::Matching,
            meta_rule: MetaRule::Smallest,
            space: FeatureSpace::Representation,
            kmeans_restarts: 5,
            kmeans_max_iters: 100,
            seed: 0,
        }
    }
}

/// Train-split points prepared for estimation: dataset indices, the clustering
/// space, and the estimated noisy posteriors, all row-aligned.
pub struct EstimationInput {
    pub idx: Vec<usize>,
    pub space: Array2<f64>,
    pub posteriors: Array2<f64>,
}

impl EstimationInput {
    pub fn from_model<P: PosteriorModel + ?Sized>(
        posterior: &P,
        data: &Dataset,
        space_of: impl FnOnce(ArrayView2<f64>) -> Result<Array2<f64>>,
    ) -> Result<Self> {
        let idx = data.indices(Split::Train);
        if idx.is_empty() {
            return Err(Error::config("no training examples to estimate from"));
        }
        let x = data.rows(&idx);
        if posterior.classes() != data.c {
            return Err(Error::shape(format!(
                "posterior model has {} outputs, data has {} classes",
                posterior.classes(),
                data.c
            )));
        }
        let posteriors = posterior.noisy_posteriors(x.view());
        let space = space_of(x.view())?;
        Ok(EstimationInput { idx, space, posteriors })
    }

    /// Uses the warmup model for posteriors and `cfg.space` for clustering.
    pub fn from_warmup(warmup: &ClassifierParams, data: &Dataset, space: FeatureSpace) -> Result<Self> {
        EstimationInput::from_model(warmup, data, |x| space.project(Some(warmup), x))
    }
}

/// k-means with `c + 1` clusters, the smallest taken as meta and the rest
/// matched to noisy classes.
pub fn fine_clusters(input: &EstimationInput, data: &Dataset, cfg: &EstimationConfig) -> Result<ClusterModel> {
    let c = data.c;
    let mut model = clusterkit::kmeans_restarts(
        input.space.view(),
        c + 1,
        cfg.seed,
        cfg.kmeans_max_iters,
        cfg.kmeans_restarts,
    )?;
    let labels: Vec<usize> = input.idx.iter().map(|&i| data.noisy_labels[i]).collect();
    clusterkit::identify_meta_cluster_by(&mut model, c, cfg.meta_rule, &labels)?;
    clusterkit::assign_classes(&mut model, &labels, c, cfg.matching)?;
    Ok(model)
}

/// Class-dependent extended matrix from the fine clustering.
pub fn estimate_extended<P: PosteriorModel + ?Sized>(
    posterior: &P,
    data: &Dataset,
    input: &EstimationInput,
    fine: &ClusterModel,
    cfg: &EstimationConfig,
) -> Result<(ExtendedTransitionMatrix, AnchorSet)> {
    let closed = closed_anchor_rows(
        posterior,
        data.features.view(),
        &input.idx,
        input.posteriors.view(),
        fine,
        None,
        true,
        cfg.percentile,
        cfg.anchors,
    )?;
    let mut rows: Vec<AnchorRow> = closed
        .into_iter()
        .map(|r| r.expect("global fallback always yields a row"))
        .collect();
    rows.push(detect_meta_anchors(
        posterior,
        data.features.view(),
        &input.idx,
        input.space.view(),
        fine,
        cfg.anchors,
    )?);
    let estimated: Vec<Vec<f64>> = rows
        .iter()
        .enumerate()
        .map(|(r, row)| {
            estimate_row(row).map_err(|e| match e {
                Error::AnchorShortage { detail, .. } => Error::AnchorShortage {
                    row: row_name(r, data.c),
                    detail,
                },
                other => other,
            })
        })
        .collect::<Result<_>>()?;
    let matrix = ExtendedTransitionMatrix::from_rows(&estimated, Origin::Estimated)?;
    Ok((matrix, AnchorSet { rows }))
}

fn row_name(r: usize, c: usize) -> String {
    if r == c {
        "meta".into()
    } else {
        format!("class {r}")
    }
}

/// One matrix per coarse cluster plus what is needed to route examples to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBundle {
    pub matrices: Vec<ExtendedTransitionMatrix>,
    /// Coarse clustering whose centroids route examples to matrices.
    pub coarse: ClusterModel,
    pub space: FeatureSpace,
    /// Rows of each matrix copied from the global estimate for lack of anchors.
    pub fallback_rows: Vec<Vec<usize>>,
}

impl TransitionBundle {
    /// Bundle with a single global matrix that every example routes to.
    pub fn single(matrix: ExtendedTransitionMatrix) -> Self {
        TransitionBundle {
            matrices: vec![matrix.with_cluster(Some(0))],
            coarse: ClusterModel {
                centroids: Array2::zeros((1, 0)),
                assignment: Vec::new(),
                loss: 0.0,
                loss_history: Vec::new(),
                meta_cluster: None,
                class_of_cluster: None,
            },
            space: FeatureSpace::Raw,
            fallback_rows: vec![Vec::new()],
        }
    }

    pub fn k(&self) -> usize {
        self.matrices.len()
    }

    pub fn c(&self) -> usize {
        self.matrices[0].c()
    }

    /// Matrix index for every row of `x`.
    pub fn routes(&self, warmup: Option<&ClassifierParams>, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        if self.k() == 1 {
            return Ok(vec![0; x.nrows()]);
        }
        let space = self.space.project(warmup, x)?;
        if space.ncols() != self.coarse.centroids.ncols() {
            return Err(Error::shape("routing space does not match the coarse centroids"));
        }
        Ok(space.rows().into_iter().map(|r| self.coarse.nearest(r)).collect())
    }

    pub fn validate(&self) -> Result<()> {
        if self.matrices.is_empty() {
            return Err(Error::config("bundle holds no matrices"));
        }
        if self.matrices.len() != self.fallback_rows.len() {
            return Err(Error::shape("fallback flags do not match the matrices"));
        }
        if self.k() > 1 && self.coarse.k() != self.k() {
            return Err(Error::shape("coarse clustering and matrix count disagree"));
        }
        let c = self.c();
        if self.matrices.iter().any(|t| t.c() != c) {
            return Err(Error::shape("matrices disagree on c"));
        }
        Ok(())
    }
}

/// Cluster-dependent estimation: `k` coarse clusters over the clustering
/// space, each estimated with anchors restricted to its own points. Rows with
/// no anchors inside a coarse cluster take the global row.
pub fn estimate_cluster_dependent<P: PosteriorModel + ?Sized>(
    posterior: &P,
    data: &Dataset,
    input: &EstimationInput,
    fine: &ClusterModel,
    global: &ExtendedTransitionMatrix,
    k: usize,
    cfg: &EstimationConfig,
) -> Result<TransitionBundle> {
    let n = input.idx.len();
    if k == 0 || k > n {
        return Err(Error::config(format!("cannot form {k} coarse clusters from {n} points")));
    }
    let c = data.c;
    let coarse = clusterkit::kmeans_restarts(
        input.space.view(),
        k,
        cfg.seed ^ 0x9e37_79b9_7f4a_7c15,
        cfg.kmeans_max_iters,
        cfg.kmeans_restarts,
    )?;
    let meta = fine.meta_cluster.ok_or_else(|| Error::config("meta cluster not identified"))?;
    if k == 1 {
        return Ok(TransitionBundle {
            matrices: vec![global.clone().with_cluster(Some(0))],
            coarse,
            space: cfg.space,
            fallback_rows: vec![Vec::new()],
        });
    }
    let mut matrices = Vec::with_capacity(k);
    let mut fallback_rows = Vec::with_capacity(k);
    for j in 0..k {
        let eligible: Vec<bool> = coarse.assignment.iter().map(|&a| a == j).collect();
        // only the meta flags come from the global clustering
        let pool: Vec<usize> = (0..n)
            .filter(|&p| eligible[p] && fine.assignment[p] != meta)
            .collect();
        let closed = clusterkit::pooled_anchor_rows(
            posterior,
            data.features.view(),
            &input.idx,
            input.posteriors.view(),
            &pool,
            cfg.percentile,
            cfg.anchors,
        )?;
        let mut rows = Vec::with_capacity(c + 1);
        let mut fell_back = Vec::new();
        for (r, row) in closed.into_iter().enumerate() {
            match row {
                Some(row) => rows.push(estimate_row(&row)?),
                None => {
                    fell_back.push(r);
                    rows.push(global.entries().row(r).to_vec());
                }
            }
        }
        let meta_members: Vec<usize> = (0..n)
            .filter(|&p| eligible[p] && fine.assignment[p] == meta)
            .collect();
        match clusterkit::nearest_to_mean(input.space.view(), &meta_members, cfg.anchors)? {
            Some((picks, _)) => {
                let row = AnchorRow {
                    posteriors: picks
                        .iter()
                        .map(|&p| posterior.noisy_posterior(data.features.row(input.idx[p])))
                        .collect(),
                    indices: picks.iter().map(|&p| input.idx[p]).collect(),
                    source: AnchorSource::Cluster,
                    warning: None,
                };
                rows.push(estimate_row(&row)?);
            }
            None => {
                fell_back.push(c);
                rows.push(global.meta_row());
            }
        }
        matrices.push(ExtendedTransitionMatrix::from_rows(&rows, Origin::Estimated)?.with_cluster(Some(j)));
        fallback_rows.push(fell_back);
    }
    Ok(TransitionBundle {
        matrices,
        coarse,
        space: cfg.space,
        fallback_rows,
    })
}

/// Everything produced by anchor-based estimation for one warmup model.
#[derive(Debug, Clone)]
pub struct Estimate {
    pub fine: ClusterModel,
    pub anchors: AnchorSet,
    pub global: ExtendedTransitionMatrix,
    pub bundle: TransitionBundle,
}

/// Representations → fine clustering → global `T*` → `k` cluster-dependent matrices.
pub fn estimate_all(warmup: &ClassifierParams, data: &Dataset, k: usize, cfg: &EstimationConfig) -> Result<Estimate> {
    let input = EstimationInput::from_warmup(warmup, data, cfg.space)?;
    estimate_all_with(warmup, data, &input, k, cfg)
}

/// As [`estimate_all`] for any posterior model and precomputed input.
pub fn estimate_all_with<P: PosteriorModel + ?Sized>(
    posterior: &P,
    data: &Dataset,
    input: &EstimationInput,
    k: usize,
    cfg: &EstimationConfig,
) -> Result<Estimate> {
    let fine = fine_clusters(input, data, cfg)?;
    let (global, anchors) = estimate_extended(posterior, data, input, &fine, cfg)?;
    let bundle = estimate_cluster_dependent(posterior, data, input, &fine, &global, k, cfg)?;
    Ok(Estimate {
        fine,
        anchors,
        global,
        bundle,
    })
}

/// Settings for jointly learning the slack `ΔT` and fine-tuning the classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RevisionConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam rate for the classifier.
    pub learning_rate: f64,
    /// Adam rate for the slack variables.
    pub slack_learning_rate: f64,
    /// Objective whose gradient drives both updates.
    pub objective: LossKind,
    pub weight_gradient: WeightGradient,
    pub epsilon: f64,
    pub seed: u64,
}

impl Default for RevisionConfig {
    fn default() -> Self {
        RevisionConfig {
            epochs: 10,
            batch_size: 128,
            learning_rate: 5e-7,
            slack_learning_rate: 5e-7,
            objective: LossKind::Reweighted,
            weight_gradient: WeightGradient::StopGradient,
            epsilon: DEFAULT_EPSILON,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Revision {
    pub bundle: TransitionBundle,
    pub params: ClassifierParams,
    pub steps: usize,
}

/// Clamps to `[0, 1]` and renormalizes every row (an all-zero row becomes uniform).
pub fn project_rows(entries: &mut Array2<f64>) {
    let c = entries.ncols();
    for mut row in entries.rows_mut() {
        row.mapv_inplace(|v| v.clamp(0.0, 1.0));
        let s = row.sum();
        if s > 0.0 {
            row /= s;
        } else {
            row.fill(1.0 / c as f64);
        }
    }
}

struct SlackAdam {
    first: Vec<Array2<f64>>,
    second: Vec<Array2<f64>>,
    step: i32,
}

impl SlackAdam {
    fn new(shape: (usize, usize), k: usize) -> Self {
        SlackAdam {
            first: vec![Array2::zeros(shape); k],
            second: vec![Array2::zeros(shape); k],
            step: 0,
        }
    }

    fn step(&mut self, entries: &mut [Array2<f64>], grads: &[Array2<f64>], lr: f64) {
        self.step += 1;
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8);
        let (c1, c2) = (1.0 - b1.powi(self.step), 1.0 - b2.powi(self.step));
        for r in 0..entries.len() {
            ndarray::Zip::from(&mut entries[r])
                .and(&grads[r])
                .and(&mut self.first[r])
                .and(&mut self.second[r])
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

/// Gradient of the mean batch objective with respect to each routed matrix,
/// taken through the row normalization.
fn slack_gradients(
    probs: ArrayView2<f64>,
    labels: &[usize],
    routes: &[usize],
    matrices: &[Array2<f64>],
    cfg: &RevisionConfig,
) -> Vec<Array2<f64>> {
    let b = labels.len().max(1) as f64;
    let mut grads: Vec<Array2<f64>> = matrices.iter().map(|t| Array2::zeros(t.raw_dim())).collect();
    for (i, g) in probs.rows().into_iter().enumerate() {
        let (y, r) = (labels[i], routes[i]);
        let t = &matrices[r];
        let f: f64 = g.iter().enumerate().map(|(k, gk)| gk * t[[k, y]]).sum();
        if f < cfg.epsilon {
            continue;
        }
        // ∂loss/∂f; the loss depends on T_ky only through f = Σ_k T_ky g_k, and
        // the slack always sees the weight's dependence on T
        let dldf = match cfg.objective {
            LossKind::Reweighted => -g[y] * -g[y].max(PROB_FLOOR).ln() / (f * f),
            LossKind::ReweightedMapped => -g[y] * (1.0 - f.ln()) / (f * f),
            _ => -1.0 / f,
        };
        for (k, gk) in g.iter().enumerate() {
            grads[r][[k, y]] += dldf * gk / b;
        }
    }
    for (grad, t) in grads.iter_mut().zip(matrices) {
        for (mut grow, trow) in grad.rows_mut().into_iter().zip(t.rows()) {
            let inner: f64 = grow.iter().zip(trow.iter()).map(|(a, b)| a * b).sum();
            grow.mapv_inplace(|v| v - inner);
        }
    }
    grads
}

/// Learns an additive slack on every matrix jointly with fine-tuning the
/// classifier; after every step each matrix is clamped to `[0, 1]` and its
/// rows renormalized.
pub fn revise(
    bundle: &TransitionBundle,
    params: &ClassifierParams,
    train: &TrainSet<'_>,
    cfg: &RevisionConfig,
) -> Result<Revision> {
    bundle.validate()?;
    if cfg.batch_size == 0 {
        return Err(Error::config("revision batch_size must be at least 1"));
    }
    if !cfg.objective.needs_matrix() {
        return Err(Error::config("revision needs a transition-aware objective"));
    }
    if params.out_dim() != bundle.c() + 1 {
        return Err(Error::shape("revision needs a (c+1)-output classifier"));
    }
    let n = train.labels.len();
    let default_routes = vec![0usize; n];
    let routes = train.routes.unwrap_or(&default_routes);
    let mut params = params.clone();
    let mut matrices: Vec<Array2<f64>> = bundle.matrices.iter().map(|t| t.entries().clone()).collect();
    let mut slack_opt = SlackAdam::new(matrices[0].dim(), matrices.len());
    let mut net_opt = Optimizer::new(OptimizerKind::Adam, &params, 0.0, 0.0);
    let mut rng = stream_rng(cfg.seed, streams::SHUFFLE);
    let mut order: Vec<usize> = (0..n).collect();
    let mut steps = 0;
    let mut stable = (params.clone(), matrices.clone());

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.features.select(Axis(0), chunk);
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let batch_routes: Vec<usize> = chunk.iter().map(|&i| routes[i]).collect();
            let current = assemble(bundle, &matrices, Origin::Revised)?;
            let objective = Objective {
                kind: cfg.objective,
                matrices: current,
                epsilon: cfg.epsilon,
                weight_gradient: cfg.weight_gradient,
            };
            let (loss, net_grads) =
                crate::netcore::loss_and_grad(&params, x.view(), &labels, &objective, Some(&batch_routes))?;
            if !loss.loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    last_stable: Box::new(Checkpoint::Revision {
                        params: stable.0,
                        bundle: rebuild(bundle, &stable.1)?,
                    }),
                });
            }
            let probs = params.predict_proba(x.view())?;
            let slack = slack_gradients(probs.view(), &labels, &batch_routes, &matrices, cfg);
            slack_opt.step(&mut matrices, &slack, cfg.slack_learning_rate);
            for t in &mut matrices {
                project_rows(t);
            }
            net_opt.step(&mut params, &net_grads, cfg.learning_rate);
            steps += 1;
            stable = (params.clone(), matrices.clone());
        }
    }
    let bundle = if steps == 0 { bundle.clone() } else { rebuild(bundle, &matrices)? };
    Ok(Revision { bundle, params, steps })
}

fn assemble(bundle: &TransitionBundle, matrices: &[Array2<f64>], origin: Origin) -> Result<Vec<ExtendedTransitionMatrix>> {
    matrices
        .iter()
        .zip(&bundle.matrices)
        .map(|(m, t)| Ok(ExtendedTransitionMatrix::new(m.clone(), origin)?.with_cluster(t.cluster_id())))
        .collect()
}

fn rebuild(bundle: &TransitionBundle, matrices: &[Array2<f64>]) -> Result<TransitionBundle> {
    Ok(TransitionBundle {
        matrices: assemble(bundle, matrices, Origin::Revised)?,
        ..bundle.clone()
    })
}

/// Additive slack `revised − initial` of each matrix.
pub fn slack(initial: &TransitionBundle, revised: &TransitionBundle) -> Vec<Array2<f64>> {
    initial
        .matrices
        .iter()
        .zip(&revised.matrices)
        .map(|(a, b)| b.entries() - a.entries())
        .collect()
}

/// Perturbs entry `(row, row)` by `delta` and renormalizes that row.
pub fn perturb_diagonal(t: &ExtendedTransitionMatrix, row: usize, delta: f64) -> Result<ExtendedTransitionMatrix> {
    let mut e = t.entries().clone();
    e[[row, row]] += delta;
    let mut r = e.row_mut(row);
    let s = r.sum();
    r /= s;
    Ok(ExtendedTransitionMatrix::new(e, Origin::Estimated)?.with_cluster(t.cluster_id()))
}

/// Builds anchor rows directly from known anchor inputs (bypassing detection).
pub fn anchor_row_at<P: PosteriorModel + ?Sized>(posterior: &P, points: ArrayView2<f64>) -> AnchorRow {
    AnchorRow {
        indices: (0..points.nrows()).collect(),
        posteriors: points.rows().into_iter().map(|x| posterior.noisy_posterior(x)).collect(),
        source: AnchorSource::Cluster,
        warning: None,
    }
}

/// ℓ1 errors split into the closed block `T`, the meta row `T°` and all of `T*`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BlockErrors {
    pub closed: f64,
    pub meta: f64,
    pub total: f64,
}

impl BlockErrors {
    pub fn between(estimate: &ExtendedTransitionMatrix, truth: &ExtendedTransitionMatrix) -> Result<Self> {
        let c = truth.c();
        let e = estimate.entries();
        let t = truth.entries();
        Ok(BlockErrors {
            closed: l1_distance(estimate.closed_block(), truth.closed_block())?,
            meta: l1_distance(e.slice(s![c..c + 1, ..]), t.slice(s![c..c + 1, ..]))?,
            total: l1_error(estimate, truth)?,
        })
    }
}

/// Mean errors of the matrix each row of `x` is routed to, measured against
/// the ground truth `truths[truth_of[i]]` that governed that row's noise.
pub fn routed_error(
    bundle: &TransitionBundle,
    warmup: Option<&ClassifierParams>,
    x: ArrayView2<f64>,
    truth_of: &[usize],
    truths: &[ExtendedTransitionMatrix],
) -> Result<BlockErrors> {
    if truth_of.len() != x.nrows() || x.nrows() == 0 {
        return Err(Error::shape("need one truth index per row"));
    }
    let routes = bundle.routes(warmup, x)?;
    let mut counts = vec![vec![0usize; truths.len()]; bundle.k()];
    for (&r, &g) in routes.iter().zip(truth_of) {
        if g >= truths.len() {
            return Err(Error::shape(format!("no truth matrix {g}")));
        }
        counts[r][g] += 1;
    }
    let mut sum = BlockErrors::default();
    for (r, row) in counts.iter().enumerate() {
        for (g, &m) in row.iter().enumerate().filter(|(_, &m)| m > 0) {
            let e = BlockErrors::between(&bundle.matrices[r], &truths[g])?;
            let w = m as f64;
            sum.closed += w * e.closed;
            sum.meta += w * e.meta;
            sum.total += w * e.total;
        }
    }
    let n = routes.len() as f64;
    Ok(BlockErrors {
        closed: sum.closed / n,
        meta: sum.meta / n,
        total: sum.total / n,
    })
}

/// Per-example matrix lookups, collected for reporting.
pub fn route_histogram(routes: &[usize], k: usize) -> Array1<usize> {
    let mut h = Array1::zeros(k);
    for &r in routes {
        h[r] += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn fixture() -> ExtendedTransitionMatrix {
        ExtendedTransitionMatrix::new(array![[0.8, 0.2], [0.3, 0.7], [0.5, 0.5]], Origin::Estimated).unwrap()
    }

    #[test]
    fn noisy_posterior_examples() {
        let p = fixture().noisy_posterior(&[0.5, 0.3, 0.2]).unwrap();
        assert!((p[0] - 0.59).abs() < 1e-15);
        assert!((p[1] - 0.41).abs() < 1e-15);
        let id = ExtendedTransitionMatrix::new(array![[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]], Origin::True).unwrap();
        assert_eq!(id.noisy_posterior(&[1.0, 0.0, 0.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(fixture().noisy_posterior(&[0.5, 0.5]), Err(Error::Shape(_))));
    }

    #[test]
    fn estimate_row_examples() {
        let row = |ps: Vec<Vec<f64>>| AnchorRow {
            indices: (0..ps.len()).collect(),
            posteriors: ps,
            source: AnchorSource::Cluster,
            warning: None,
        };
        assert_eq!(estimate_row(&row(vec![vec![0.75, 0.25]])).unwrap(), vec![0.75, 0.25]);
        let r = estimate_row(&row(vec![vec![0.8, 0.2], vec![0.6, 0.4]])).unwrap();
        assert!((r[0] - 0.7).abs() < 1e-15 && (r[1] - 0.3).abs() < 1e-15);
        let r = estimate_row(&row(vec![vec![0.5 + 1e-6, 0.5], vec![0.3, 0.7 - 1e-6]])).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(matches!(estimate_row(&row(vec![])), Err(Error::AnchorShortage { .. })));
    }

    #[test]
    fn l1_examples() {
        let a = array![[0.7, 0.3]];
        let b = array![[0.8, 0.2]];
        assert!((l1_distance(a.view(), b.view()).unwrap() - 0.2).abs() < 1e-15);
        assert_eq!(l1_error(&fixture(), &fixture()).unwrap(), 0.0);
        let c = array![[1.0, 0.0, 0.0]];
        assert!(matches!(l1_distance(a.view(), c.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn rejects_bad_shapes_and_rows() {
        assert!(ExtendedTransitionMatrix::new(array![[0.5, 0.5], [0.5, 0.5]], Origin::True).is_err());
        assert!(ExtendedTransitionMatrix::new(array![[0.5, 0.6], [0.5, 0.5], [0.5, 0.5]], Origin::True).is_err());
        assert!(ExtendedTransitionMatrix::new(array![[1.5, -0.5], [0.5, 0.5], [0.5, 0.5]], Origin::True).is_err());
    }

    #[test]
    fn json_round_trip() {
        let t = fixture().with_cluster(Some(2));
        let s = serde_json::to_string(&t).unwrap();
        let back: ExtendedTransitionMatrix = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<ExtendedTransitionMatrix>(
            r#"{"origin":"true","entries":[[0.5,0.6],[0.5,0.5],[0.5,0.5]]}"#
        )
        .is_err());
    }

    #[test]
    fn projection_keeps_rows_stochastic() {
        let mut e = array![[1.2, -0.1], [0.0, 0.0], [0.3, 0.3]];
        project_rows(&mut e);
        assert_eq!(e.row(0).to_vec(), vec![1.0, 0.0]);
        assert_eq!(e.row(1).to_vec(), vec![0.5, 0.5]);
        assert_eq!(e.row(2).to_vec(), vec![0.5, 0.5]);
    }
}
