//! k-means++ clustering, meta-cluster identification, cluster→class matching
//! and anchor-point detection.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::PosteriorModel;
use crate::rng::{stream_rng, streams};

/// Relative slack allowed when checking that Lloyd iterations never increase the loss.
const MONOTONE_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterModel {
    /// `k × q` centroids.
    pub centroids: Array2<f64>,
    /// Cluster index of every clustered point.
    pub assignment: Vec<usize>,
    /// Sum of squared distances to the assigned centroids.
    pub loss: f64,
    /// Loss after every Lloyd update, in order.
    pub loss_history: Vec<f64>,
    pub meta_cluster: Option<usize>,
    /// Closed class of each cluster (`None` for the meta cluster).
    pub class_of_cluster: Option<Vec<Option<usize>>>,
}

impl ClusterModel {
    pub fn k(&self) -> usize {
        self.centroids.nrows()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k()];
        for &a in &self.assignment {
            sizes[a] += 1;
        }
        sizes
    }

    pub fn members(&self, cluster: usize) -> Vec<usize> {
        self.assignment
            .iter()
            .enumerate()
            .filter_map(|(i, &a)| (a == cluster).then_some(i))
            .collect()
    }

    /// Nearest centroid (squared Euclidean, ties to the lowest index).
    pub fn nearest(&self, x: ArrayView1<f64>) -> usize {
        nearest(&self.centroids, x).0
    }

    /// Cluster assigned to closed class `class`, once classes are assigned.
    pub fn cluster_of_class(&self, class: usize) -> Option<usize> {
        self.class_of_cluster
            .as_ref()?
            .iter()
            .position(|&c| c == Some(class))
    }
}

pub fn sq_dist(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y).powi(2)).sum()
}

fn nearest(centroids: &Array2<f64>, x: ArrayView1<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centroids.rows().into_iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Mean of the given rows, summed in index order.
pub fn mean_of(points: ArrayView2<f64>, members: &[usize]) -> Array1<f64> {
    let mut sum = Array1::<f64>::zeros(points.ncols());
    for &i in members {
        sum += &points.row(i);
    }
    sum / members.len().max(1) as f64
}

fn total_loss(points: ArrayView2<f64>, centroids: &Array2<f64>, assignment: &[usize]) -> f64 {
    assignment
        .iter()
        .enumerate()
        .map(|(i, &a)| sq_dist(points.row(i), centroids.row(a)))
        .sum()
}

fn plus_plus_init(points: ArrayView2<f64>, k: usize, rng: &mut impl Rng) -> Array2<f64> {
    let n = points.nrows();
    let mut centroids = Array2::<f64>::zeros((k, points.ncols()));
    centroids.row_mut(0).assign(&points.row(rng.random_range(0..n)));
    let mut dist: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), centroids.row(0))).collect();
    for j in 1..k {
        let pick = match WeightedIndex::new(&dist) {
            Ok(w) => w.sample(rng),
            // every point already coincides with a centroid
            Err(_) => rng.random_range(0..n),
        };
        centroids.row_mut(j).assign(&points.row(pick));
        for (i, d) in dist.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), centroids.row(j)));
        }
    }
    centroids
}

/// Gives every empty cluster the point farthest from its own centroid, taken
/// from a cluster that keeps at least one member.
fn repair_empty(points: ArrayView2<f64>, centroids: &mut Array2<f64>, assignment: &mut [usize]) {
    let k = centroids.nrows();
    loop {
        let mut sizes = vec![0usize; k];
        for &a in assignment.iter() {
            sizes[a] += 1;
        }
        let Some(empty) = sizes.iter().position(|&s| s == 0) else {
            return;
        };
        let mut far = None;
        let mut far_d = f64::NEG_INFINITY;
        for (i, &a) in assignment.iter().enumerate() {
            if sizes[a] < 2 {
                continue;
            }
            let d = sq_dist(points.row(i), centroids.row(a));
            if d > far_d {
                far_d = d;
                far = Some(i);
            }
        }
        let Some(i) = far else { return };
        assignment[i] = empty;
        centroids.row_mut(empty).assign(&points.row(i));
    }
}

/// One k-means++ seeded Lloyd run.
pub fn kmeans(points: ArrayView2<f64>, k: usize, seed: u64, max_iters: usize) -> Result<ClusterModel> {
    let mut rng = stream_rng(seed, streams::KMEANS);
    kmeans_with_rng(points, k, max_iters, &mut rng)
}

fn kmeans_with_rng(points: ArrayView2<f64>, k: usize, max_iters: usize, rng: &mut impl Rng) -> Result<ClusterModel> {
    let n = points.nrows();
    if k == 0 || n < k {
        return Err(Error::config(format!("cannot form {k} clusters from {n} points")));
    }
    if max_iters == 0 {
        return Err(Error::config("max_iters must be at least 1"));
    }
    let mut centroids = plus_plus_init(points, k, rng);
    let mut assignment = vec![0usize; n];
    let mut previous: Option<Vec<usize>> = None;
    let mut history: Vec<f64> = Vec::new();

    for _ in 0..max_iters {
        for (i, a) in assignment.iter_mut().enumerate() {
            *a = nearest(&centroids, points.row(i)).0;
        }
        repair_empty(points, &mut centroids, &mut assignment);
        if previous.as_deref() == Some(&assignment[..]) {
            break;
        }
        for j in 0..k {
            let members: Vec<usize> = (0..n).filter(|&i| assignment[i] == j).collect();
            centroids.row_mut(j).assign(&mean_of(points, &members));
        }
        let loss = total_loss(points, &centroids, &assignment);
        if let Some(&last) = history.last() {
            debug_assert!(
                loss <= last + MONOTONE_SLACK * last.abs().max(1.0),
                "Lloyd loss increased from {last} to {loss}"
            );
        }
        history.push(loss);
        previous = Some(assignment.clone());
    }
    let loss = total_loss(points, &centroids, &assignment);
    Ok(ClusterModel {
        centroids,
        assignment,
        loss,
        loss_history: history,
        meta_cluster: None,
        class_of_cluster: None,
    })
}

/// Best of `restarts` independent runs (lowest loss; ties to the earliest run).
pub fn kmeans_restarts(
    points: ArrayView2<f64>,
    k: usize,
    seed: u64,
    max_iters: usize,
    restarts: usize,
) -> Result<ClusterModel> {
    let mut rng = stream_rng(seed, streams::KMEANS);
    let mut best: Option<ClusterModel> = None;
    for _ in 0..restarts.max(1) {
        let model = kmeans_with_rng(points, k, max_iters, &mut rng)?;
        if best.as_ref().is_none_or(|b| model.loss < b.loss) {
            best = Some(model);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Marks the smallest of the `c + 1` clusters as the meta cluster (ties to the lowest index).
pub fn identify_meta_cluster(model: &mut ClusterModel, c: usize) -> Result<usize> {
    if model.k() != c + 1 {
        return Err(Error::config(format!(
            "meta-cluster identification needs c + 1 = {} clusters, model has {}",
            c + 1,
            model.k()
        )));
    }
    let sizes = model.sizes();
    let meta = (0..sizes.len())
        .min_by_key(|&j| (sizes[j], j))
        .expect("k >= 1");
    model.meta_cluster = Some(meta);
    Ok(meta)
}

/// How the meta cluster is picked among the `c + 1` clusters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetaRule {
    /// The smallest cluster; assumes open-set examples are a minority.
    #[default]
    Smallest,
    /// The cluster whose noisy-label histogram has the highest entropy; for
    /// open-set shares above the per-class share.
    LabelEntropy,
}

/// Picks the meta cluster by `rule` (ties to the lowest index).
pub fn identify_meta_cluster_by(
    model: &mut ClusterModel,
    c: usize,
    rule: MetaRule,
    noisy_labels: &[usize],
) -> Result<usize> {
    match rule {
        MetaRule::Smallest => identify_meta_cluster(model, c),
        MetaRule::LabelEntropy => {
            if model.k() != c + 1 {
                return Err(Error::config(format!(
                    "meta-cluster identification needs c + 1 = {} clusters, model has {}",
                    c + 1,
                    model.k()
                )));
            }
            if noisy_labels.len() != model.assignment.len() {
                return Err(Error::shape("labels and cluster assignment differ in length"));
            }
            let all: Vec<usize> = (0..model.k()).collect();
            let counts = label_counts(model, noisy_labels, &all, c);
            let entropy = |row: &[u64]| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .filter(|&&v| v > 0)
                    .map(|&v| {
                        let p = v as f64 / total as f64;
                        -p * p.ln()
                    })
                    .sum::<f64>()
            };
            let mut meta = 0;
            let mut best = f64::NEG_INFINITY;
            for (j, row) in counts.iter().enumerate() {
                let h = entropy(row);
                if h > best {
                    best = h;
                    meta = j;
                }
            }
            model.meta_cluster = Some(meta);
            Ok(meta)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchRule {
    /// Maximum-weight bipartite matching on the cluster × noisy-class counts.
    #[default]
    Matching,
    /// Classes in order each take the unclaimed cluster holding most of their labels.
    Greedy,
}

/// Cluster × class count matrix (`rows`: clusters in `clusters` order).
pub fn label_counts(model: &ClusterModel, noisy_labels: &[usize], clusters: &[usize], c: usize) -> Vec<Vec<u64>> {
    let mut counts = vec![vec![0u64; c]; clusters.len()];
    let row_of: Vec<Option<usize>> = (0..model.k()).map(|j| clusters.iter().position(|&x| x == j)).collect();
    for (i, &a) in model.assignment.iter().enumerate() {
        if let Some(r) = row_of[a] {
            counts[r][noisy_labels[i]] += 1;
        }
    }
    counts
}

/// Assignment of rows to distinct columns maximizing the total count; among
/// optimal assignments, the lexicographically smallest column sequence wins.
pub fn max_weight_matching(counts: &[Vec<u64>]) -> Result<Vec<usize>> {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    if rows > cols {
        return Err(Error::config("more clusters than classes to match"));
    }
    if cols > 24 {
        return Err(Error::config(format!("exact matching supports at most 24 classes, got {cols}")));
    }
    // best[r][mask]: best total for rows r.. given the columns in `mask` are taken
    let full = 1usize << cols;
    let mut best = vec![vec![i64::MIN; full]; rows + 1];
    best[rows].iter_mut().for_each(|v| *v = 0);
    for r in (0..rows).rev() {
        for mask in 0..full {
            if (mask as u32).count_ones() as usize != r {
                continue;
            }
            let mut top = i64::MIN;
            for j in 0..cols {
                if mask & (1 << j) == 0 && best[r + 1][mask | (1 << j)] != i64::MIN {
                    top = top.max(counts[r][j] as i64 + best[r + 1][mask | (1 << j)]);
                }
            }
            best[r][mask] = top;
        }
    }
    let mut mask = 0usize;
    let mut out = Vec::with_capacity(rows);
    for r in 0..rows {
        let target = best[r][mask];
        let j = (0..cols)
            .find(|&j| {
                mask & (1 << j) == 0
                    && best[r + 1][mask | (1 << j)] != i64::MIN
                    && counts[r][j] as i64 + best[r + 1][mask | (1 << j)] == target
            })
            .expect("an optimal column exists");
        out.push(j);
        mask |= 1 << j;
    }
    Ok(out)
}

/// Greedy rule: each class in order claims the unclaimed row with its largest count.
#[allow(clippy::needless_range_loop)]
pub fn greedy_matching(counts: &[Vec<u64>]) -> Result<Vec<usize>> {
    let rows = counts.len();
    let cols = counts.first().map_or(0, Vec::len);
    if rows != cols {
        return Err(Error::config("greedy matching needs as many clusters as classes"));
    }
    let mut out = vec![usize::MAX; rows];
    for j in 0..cols {
        let r = (0..rows)
            .filter(|&r| out[r] == usize::MAX)
            .max_by_key(|&r| (counts[r][j], std::cmp::Reverse(r)))
            .expect("an unclaimed row remains");
        out[r] = j;
    }
    Ok(out)
}

/// Maps each closed cluster to a distinct closed class; the meta cluster maps to `None`.
pub fn assign_classes(
    model: &mut ClusterModel,
    noisy_labels: &[usize],
    c: usize,
    rule: MatchRule,
) -> Result<Vec<Option<usize>>> {
    let meta = model
        .meta_cluster
        .ok_or_else(|| Error::config("identify the meta cluster before assigning classes"))?;
    if noisy_labels.len() != model.assignment.len() {
        return Err(Error::shape("labels and cluster assignment differ in length"));
    }
    let closed: Vec<usize> = (0..model.k()).filter(|&j| j != meta).collect();
    if closed.len() < c {
        return Err(Error::config(format!(
            "{} closed clusters for {c} classes",
            closed.len()
        )));
    }
    let counts = label_counts(model, noisy_labels, &closed, c);
    let cols = match rule {
        MatchRule::Matching => max_weight_matching(&counts)?,
        MatchRule::Greedy => greedy_matching(&counts)?,
    };
    let mut map = vec![None; model.k()];
    for (r, &cluster) in closed.iter().enumerate() {
        map[cluster] = Some(cols[r]);
    }
    model.class_of_cluster = Some(map.clone());
    Ok(map)
}

/// Where an anchor row's points came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorSource {
    /// The cluster matched to the row's class.
    Cluster,
    /// Every candidate point, because the matched cluster was too small.
    GlobalPool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRow {
    /// Dataset indices of the anchors.
    pub indices: Vec<usize>,
    /// Estimated noisy posterior at each anchor.
    pub posteriors: Vec<Vec<f64>>,
    pub source: AnchorSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Anchors for rows `0..c` (closed classes) and row `c` (meta).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    pub rows: Vec<AnchorRow>,
}

/// Positions (into `scores`) of the `m` entries at the given percentile,
/// ranked downward by score (ties to the lower index). The first pick has
/// 1-based rank `max(1, ceil((100 − percentile)·N/100))`, clamped so that `m`
/// entries fit.
pub fn select_at_percentile(scores: &[(usize, f64)], percentile: f64, m: usize) -> Vec<usize> {
    let n = scores.len();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .1
            .partial_cmp(&scores[a].1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(scores[a].0.cmp(&scores[b].0))
    });
    let rank = (((100.0 - percentile) * n as f64 / 100.0) - 1e-9).ceil().max(1.0) as usize;
    let start = (rank - 1).min(n.saturating_sub(m));
    order[start..(start + m).min(n)].to_vec()
}

fn check_anchor_args(percentile: f64, m: usize) -> Result<()> {
    if !(percentile > 0.0 && percentile <= 100.0) {
        return Err(Error::config(format!("percentile {percentile} outside (0, 100]")));
    }
    if m == 0 {
        return Err(Error::config("anchor count m must be at least 1"));
    }
    Ok(())
}

/// Closed-class anchor rows from precomputed posteriors.
///
/// `idx[p]` is the dataset index of clustered point `p`; `posteriors` and
/// `clusters.assignment` are aligned with `idx`. Points with `eligible[p] ==
/// false` are ignored. When the class cluster has fewer than `m` candidates the
/// search widens to every eligible point if `global_fallback` is set, otherwise
/// the row is reported as `None`.
#[allow(clippy::too_many_arguments)]
pub fn closed_anchor_rows<P: PosteriorModel + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    idx: &[usize],
    posteriors: ArrayView2<f64>,
    clusters: &ClusterModel,
    eligible: Option<&[bool]>,
    global_fallback: bool,
    percentile: f64,
    m: usize,
) -> Result<Vec<Option<AnchorRow>>> {
    check_anchor_args(percentile, m)?;
    let c = posteriors.ncols();
    let ok = |p: usize| eligible.is_none_or(|e| e[p]);
    let mut rows = Vec::with_capacity(c);
    for class in 0..c {
        let cluster = clusters
            .cluster_of_class(class)
            .ok_or_else(|| Error::config(format!("class {class} has no assigned cluster")))?;
        let mut pool: Vec<usize> = (0..idx.len())
            .filter(|&p| clusters.assignment[p] == cluster && ok(p))
            .collect();
        let mut source = AnchorSource::Cluster;
        if pool.len() < m {
            if !global_fallback {
                rows.push(None);
                continue;
            }
            pool = (0..idx.len()).filter(|&p| ok(p)).collect();
            source = AnchorSource::GlobalPool;
            if pool.len() < m {
                return Err(Error::AnchorShortage {
                    row: format!("class {class}"),
                    detail: format!("{} candidates, {m} anchors required", pool.len()),
                });
            }
        }
        let scores: Vec<(usize, f64)> = pool.iter().map(|&p| (idx[p], posteriors[[p, class]])).collect();
        let picks = select_at_percentile(&scores, percentile, m);
        let indices: Vec<usize> = picks.iter().map(|&s| idx[pool[s]]).collect();
        let posteriors = indices
            .iter()
            .map(|&i| model.noisy_posterior(features.row(i)))
            .collect();
        rows.push(Some(AnchorRow {
            indices,
            posteriors,
            source,
            warning: None,
        }));
    }
    Ok(rows)
}

/// Smallest pool whose top `100 − percentile` percent still holds `m` points.
pub fn min_anchor_pool(percentile: f64, m: usize) -> usize {
    let tail = 1.0 - percentile / 100.0;
    if tail <= 0.0 {
        m
    } else {
        (m as f64 / tail - 1e-9).ceil() as usize
    }
}

/// Closed-class anchor rows drawn from a pool of clustered points. Class `i`
/// uses the pool members whose posterior argmax is `i` and takes the `m` at the
/// given percentile; a class with fewer than [`min_anchor_pool`] such members
/// gets `None`.
pub fn pooled_anchor_rows<P: PosteriorModel + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    idx: &[usize],
    posteriors: ArrayView2<f64>,
    pool: &[usize],
    percentile: f64,
    m: usize,
) -> Result<Vec<Option<AnchorRow>>> {
    check_anchor_args(percentile, m)?;
    let c = posteriors.ncols();
    let need = min_anchor_pool(percentile, m);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
    for &p in pool {
        let row = posteriors.row(p);
        let top = (1..c).fold(0, |b, j| if row[j] > row[b] { j } else { b });
        by_class[top].push(p);
    }
    Ok(by_class
        .iter()
        .enumerate()
        .map(|(class, members)| {
            if members.len() < need {
                return None;
            }
            let scores: Vec<(usize, f64)> = members.iter().map(|&p| (idx[p], posteriors[[p, class]])).collect();
            let indices: Vec<usize> = select_at_percentile(&scores, percentile, m)
                .iter()
                .map(|&s| idx[members[s]])
                .collect();
            let posteriors = indices.iter().map(|&i| model.noisy_posterior(features.row(i))).collect();
            Some(AnchorRow {
                indices,
                posteriors,
                source: AnchorSource::Cluster,
                warning: None,
            })
        })
        .collect())
}

/// Closed-class anchors: within each class cluster, the `m` points at the given
/// percentile of `P̂(Ỹ = class | x)`, falling back to all train points when the
/// cluster is too small.
pub fn detect_closed_anchors<P: PosteriorModel + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    idx: &[usize],
    clusters: &ClusterModel,
    percentile: f64,
    m: usize,
) -> Result<Vec<AnchorRow>> {
    let points = features.select(Axis(0), idx);
    let posteriors = model.noisy_posteriors(points.view());
    let rows = closed_anchor_rows(model, features, idx, posteriors.view(), clusters, None, true, percentile, m)?;
    Ok(rows.into_iter().map(|r| r.expect("global fallback always yields a row")).collect())
}

/// The `m` members nearest their own mean (ties to the lower index), or fewer
/// with a warning when the group is smaller than `m`. `None` for an empty group.
pub fn nearest_to_mean(space: ArrayView2<f64>, members: &[usize], m: usize) -> Result<Option<(Vec<usize>, Option<String>)>> {
    if m == 0 {
        return Err(Error::config("anchor count m must be at least 1"));
    }
    if members.is_empty() {
        return Ok(None);
    }
    let centroid = mean_of(space, members);
    let mut ranked: Vec<(f64, usize)> = members
        .iter()
        .map(|&p| (sq_dist(space.row(p), centroid.view()), p))
        .collect();
    ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
    let take = m.min(ranked.len());
    let warning = (take < m).then(|| format!("meta cluster holds {} points; using {take} anchors instead of {m}", ranked.len()));
    Ok(Some((ranked[..take].iter().map(|&(_, p)| p).collect(), warning)))
}

/// Meta-class anchors: the `m` meta-cluster points nearest its centroid in
/// the clustering space. `space` rows are aligned with `idx`.
pub fn detect_meta_anchors<P: PosteriorModel + ?Sized>(
    model: &P,
    features: ArrayView2<f64>,
    idx: &[usize],
    space: ArrayView2<f64>,
    clusters: &ClusterModel,
    m: usize,
) -> Result<AnchorRow> {
    let meta = clusters
        .meta_cluster
        .ok_or_else(|| Error::config("meta cluster not identified"))?;
    let members = clusters.members(meta);
    let (picks, warning) = nearest_to_mean(space, &members, m)?.ok_or_else(|| Error::AnchorShortage {
        row: "meta".into(),
        detail: "the meta cluster is empty".into(),
    })?;
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    let indices: Vec<usize> = picks.iter().map(|&p| idx[p]).collect();
    let posteriors = indices.iter().map(|&i| model.noisy_posterior(features.row(i))).collect();
    Ok(AnchorRow {
        indices,
        posteriors,
        source: AnchorSource::Cluster,
        warning,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn anchor_pool_floor() {
        assert_eq!(min_anchor_pool(97.0, 5), 167);
        assert_eq!(min_anchor_pool(90.0, 1), 10);
        assert_eq!(min_anchor_pool(100.0, 5), 5);
    }
    use ndarray::array;

    #[test]
    fn line_example() {
        let pts = array![[0.0], [1.0], [10.0]];
        let model = kmeans_restarts(pts.view(), 2, 1, 50, 10).unwrap();
        assert!((model.loss - 0.5).abs() < 1e-12);
        assert_eq!(model.assignment[0], model.assignment[1]);
        assert_ne!(model.assignment[0], model.assignment[2]);
        let mut cents: Vec<f64> = model.centroids.column(0).to_vec();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cents, vec![0.5, 10.0]);
    }

    #[test]
    fn k_equals_n_has_zero_loss() {
        let pts = array![[0.0, 1.0], [3.0, -1.0], [5.0, 5.0], [-2.0, 0.5]];
        let model = kmeans(pts.view(), 4, 3, 20).unwrap();
        assert_eq!(model.loss, 0.0);
        let mut a = model.assignment.clone();
        a.sort();
        assert_eq!(a, vec![0, 1, 2, 3]);
    }

    #[test]
    fn identical_points_single_cluster() {
        let pts = Array2::from_elem((5, 2), 3.5);
        let model = kmeans(pts.view(), 1, 0, 10).unwrap();
        assert_eq!(model.loss, 0.0);
        assert_eq!(model.centroids.row(0).to_vec(), vec![3.5, 3.5]);
    }

    #[test]
    fn identical_points_more_clusters_repairs_empties() {
        let pts = Array2::from_elem((5, 2), 1.0);
        let model = kmeans(pts.view(), 3, 0, 10).unwrap();
        assert!(model.sizes().iter().all(|&s| s > 0));
        assert_eq!(model.loss, 0.0);
    }

    #[test]
    fn too_few_points() {
        let pts = array![[0.0], [1.0]];
        assert!(matches!(kmeans(pts.view(), 3, 0, 10), Err(Error::Config(_))));
    }

    fn with_sizes(sizes: &[usize]) -> ClusterModel {
        let assignment: Vec<usize> = sizes.iter().enumerate().flat_map(|(j, &s)| std::iter::repeat_n(j, s)).collect();
        ClusterModel {
            centroids: Array2::zeros((sizes.len(), 1)),
            assignment,
            loss: 0.0,
            loss_history: vec![],
            meta_cluster: None,
            class_of_cluster: None,
        }
    }

    #[test]
    fn meta_is_smallest_with_index_tie_break() {
        let mut m = with_sizes(&[400, 380, 90]);
        assert_eq!(identify_meta_cluster(&mut m, 2).unwrap(), 2);
        let mut m = with_sizes(&[100, 100, 100]);
        assert_eq!(identify_meta_cluster(&mut m, 2).unwrap(), 0);
        let mut m = with_sizes(&[10, 10]);
        assert!(matches!(identify_meta_cluster(&mut m, 2), Err(Error::Config(_))));
    }

    #[test]
    fn matching_examples() {
        assert_eq!(max_weight_matching(&[vec![90, 10], vec![5, 95]]).unwrap(), vec![0, 1]);
        assert_eq!(max_weight_matching(&[vec![60, 40], vec![70, 30]]).unwrap(), vec![1, 0]);
        assert_eq!(max_weight_matching(&[vec![7; 3], vec![7; 3], vec![7; 3]]).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn assign_classes_skips_meta() {
        // clusters 0 and 2 are closed; cluster 1 is meta
        let mut m = with_sizes(&[3, 2, 3]);
        m.meta_cluster = Some(1);
        let labels = vec![1, 1, 0, 0, 1, 0, 0, 0];
        let map = assign_classes(&mut m, &labels, 2, MatchRule::Matching).unwrap();
        assert_eq!(map, vec![Some(1), None, Some(0)]);
        assert_eq!(m.cluster_of_class(0), Some(2));
    }

    #[test]
    fn percentile_rank_arithmetic() {
        let scores: Vec<(usize, f64)> = (0..100).map(|i| (i, 1.0 - i as f64 * 0.001)).collect();
        assert_eq!(select_at_percentile(&scores, 97.0, 1), vec![2]);
        assert_eq!(select_at_percentile(&scores, 100.0, 1), vec![0]);
        assert_eq!(select_at_percentile(&scores, 97.0, 3), vec![2, 3, 4]);
        // near the bottom the window is clamped so that m entries fit
        assert_eq!(select_at_percentile(&scores[..3], 1.0, 2), vec![1, 2]);
    }

    #[test]
    fn meta_anchor_distance_example() {
        let space = array![[0.0, 0.0], [1.0, 0.0], [5.0, 5.0]];
        let (picks, warn) = nearest_to_mean(space.view(), &[0, 1, 2], 1).unwrap().unwrap();
        assert_eq!(picks, vec![1]);
        assert!(warn.is_none());
        let (picks, warn) = nearest_to_mean(space.view(), &[0, 1, 2], 5).unwrap().unwrap();
        assert_eq!(picks.len(), 3);
        assert!(warn.is_some());
        assert!(matches!(nearest_to_mean(space.view(), &[0], 0), Err(Error::Config(_))));
    }
}
