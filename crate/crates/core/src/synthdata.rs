//! Synthetic Gaussian-mixture datasets and controlled mixed label noise.
//!
//! Closed-set classes are isotropic Gaussians; open-set ("outside") examples
//! come from a separate reservoir of extra populations. Noise injection uses
//! exact-count sampling, so the number of corrupted labels is a deterministic
//! function of the rates and the split sizes.
//!
//! Labels are 0-based throughout: closed classes are `0..c` and the meta class
//! (the union of every open-set population) is `c`.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netcore::PosteriorModel;
use crate::rng::{stream_rng, streams};
use crate::transition::{ExtendedTransitionMatrix, Origin};

/// Slack added before flooring rate × count products so that e.g.
/// `0.3 * 1000 = 299.99999999999994` still yields 300.
const COUNT_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Features plus clean/noisy labels and split tags.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Array2<f64>,
    /// Clean labels in `0..=c`; `c` marks open-set (meta) instances.
    pub clean_labels: Vec<usize>,
    /// Observed labels, always in `0..c`.
    pub noisy_labels: Vec<usize>,
    pub split: Vec<Split>,
    pub c: usize,
}

impl Dataset {
    pub fn new(
        features: Array2<f64>,
        clean_labels: Vec<usize>,
        noisy_labels: Vec<usize>,
        split: Vec<Split>,
        c: usize,
    ) -> Result<Self> {
        let n = features.nrows();
        if clean_labels.len() != n || noisy_labels.len() != n || split.len() != n {
            return Err(Error::shape(format!(
                "dataset columns disagree: {} feature rows, {} clean, {} noisy, {} split tags",
                n,
                clean_labels.len(),
                noisy_labels.len(),
                split.len()
            )));
        }
        if c == 0 {
            return Err(Error::config("class count must be positive"));
        }
        if let Some(&bad) = clean_labels.iter().find(|&&y| y > c) {
            return Err(Error::shape(format!("clean label {bad} outside 0..={c}")));
        }
        if let Some(&bad) = noisy_labels.iter().find(|&&y| y >= c) {
            return Err(Error::shape(format!("noisy label {bad} outside 0..{c}")));
        }
        Ok(Dataset {
            features,
            clean_labels,
            noisy_labels,
            split,
            c,
        })
    }

    pub fn n(&self) -> usize {
        self.features.nrows()
    }

    pub fn d(&self) -> usize {
        self.features.ncols()
    }

    pub fn meta_label(&self) -> usize {
        self.c
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.split
            .iter()
            .enumerate()
            .filter_map(|(i, &s)| (s == split).then_some(i))
            .collect()
    }

    pub fn count(&self, split: Split) -> usize {
        self.split.iter().filter(|&&s| s == split).count()
    }

    /// Feature rows for the given indices, in order.
    pub fn rows(&self, idx: &[usize]) -> Array2<f64> {
        self.features.select(Axis(0), idx)
    }

    pub fn is_open(&self, i: usize) -> bool {
        self.clean_labels[i] == self.c
    }

    /// Stacks two datasets over the same label space.
    pub fn concat(&self, other: &Dataset) -> Result<Dataset> {
        if self.c != other.c || self.d() != other.d() {
            return Err(Error::shape(format!(
                "cannot concatenate datasets with (c, d) = ({}, {}) and ({}, {})",
                self.c,
                self.d(),
                other.c,
                other.d()
            )));
        }
        let features = ndarray::concatenate(Axis(0), &[self.features.view(), other.features.view()])
            .map_err(|e| Error::shape(e.to_string()))?;
        let cat = |a: &[usize], b: &[usize]| a.iter().chain(b).copied().collect::<Vec<_>>();
        Dataset::new(
            features,
            cat(&self.clean_labels, &other.clean_labels),
            cat(&self.noisy_labels, &other.noisy_labels),
            self.split.iter().chain(&other.split).copied().collect(),
            self.c,
        )
    }
}

/// Fractions used to tag examples as train/val/test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    /// Fraction of all examples held out as test.
    pub test: f64,
    /// Fraction of the remaining (training) examples held out as validation.
    pub val: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            test: 0.2,
            val: 0.1,
        }
    }
}

/// Gaussian mixture with `c` closed classes followed by `p` open-set populations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub c: usize,
    pub d: usize,
    /// `c + p` means: the closed classes first, then the open-set populations.
    pub means: Vec<Vec<f64>>,
    /// Per-population isotropic covariance scale (covariance = scale · I).
    pub covariance_scale: Vec<f64>,
    pub class_priors: Vec<f64>,
    /// Reservoir size as a multiple of the dataset size `n`.
    pub open_fraction_reservoir: f64,
    #[serde(default)]
    pub splits: SplitFractions,
}

impl MixtureSpec {
    /// Axis-aligned fixture: class `i` sits at `separation · e_i` and the `p`
    /// open-set populations sit together on the far side of the origin, at least
    /// `separation` standard deviations from every class mean. Unit covariance,
    /// uniform priors.
    pub fn separated(c: usize, d: usize, p: usize, separation: f64) -> Result<Self> {
        if c == 0 || d < c {
            return Err(Error::config(format!(
                "separated fixture needs 1 <= c <= d (got c={c}, d={d})"
            )));
        }
        let mut means = Vec::with_capacity(c + p);
        for i in 0..c {
            let mut m = vec![0.0; d];
            m[i] = separation;
            means.push(m);
        }
        let anchor: Vec<f64> = (0..d)
            .map(|j| if j < c { -separation / (c as f64).sqrt() } else { 0.0 })
            .collect();
        for q in 0..p {
            let mut m = anchor.clone();
            // nudge the open populations apart along a spare axis
            let spread = 2.0 * (q as f64 - (p as f64 - 1.0) / 2.0);
            if d > c {
                m[c] += spread;
            } else {
                m[0] += spread;
            }
            means.push(m);
        }
        Ok(MixtureSpec {
            c,
            d,
            means,
            covariance_scale: vec![1.0; c + p],
            class_priors: vec![1.0 / c as f64; c],
            open_fraction_reservoir: 1.0,
            splits: SplitFractions::default(),
        })
    }

    pub fn open_populations(&self) -> usize {
        self.means.len().saturating_sub(self.c)
    }

    /// Shifts every population mean by `offset`.
    pub fn shifted(&self, offset: &[f64]) -> MixtureSpec {
        let mut out = self.clone();
        for m in &mut out.means {
            for (v, o) in m.iter_mut().zip(offset) {
                *v += o;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.c == 0 || self.d == 0 {
            return Err(Error::config("mixture needs c >= 1 and d >= 1"));
        }
        if self.means.len() < self.c {
            return Err(Error::config(format!(
                "mixture lists {} means for {} classes",
                self.means.len(),
                self.c
            )));
        }
        if let Some(m) = self.means.iter().find(|m| m.len() != self.d) {
            return Err(Error::config(format!(
                "mean of dimension {} in a {}-dimensional mixture",
                m.len(),
                self.d
            )));
        }
        if self.covariance_scale.len() != self.means.len() {
            return Err(Error::config(format!(
                "{} covariance scales for {} populations",
                self.covariance_scale.len(),
                self.means.len()
            )));
        }
        if self.covariance_scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::config("covariance scales must be positive and finite"));
        }
        if self.class_priors.len() != self.c
            || self.class_priors.iter().any(|&p| !(p >= 0.0))
            || (self.class_priors.iter().sum::<f64>() - 1.0).abs() > 1e-12
        {
            return Err(Error::config("class priors must be a simplex vector of length c"));
        }
        for a in 0..self.means.len() {
            for b in a + 1..self.means.len() {
                if self.means[a] == self.means[b] {
                    return Err(Error::config(format!("populations {a} and {b} share a mean")));
                }
            }
        }
        if !(self.open_fraction_reservoir >= 0.0) {
            return Err(Error::config("reservoir fraction must be non-negative"));
        }
        let s = self.splits;
        if !(0.0..1.0).contains(&s.test) || !(0.0..1.0).contains(&s.val) {
            return Err(Error::config("split fractions must lie in [0, 1)"));
        }
        Ok(())
    }

    fn sample_population(&self, pop: usize, rng: &mut impl Rng, out: &mut [f64]) {
        let sd = self.covariance_scale[pop].sqrt();
        for (o, &mu) in out.iter_mut().zip(&self.means[pop]) {
            let z: f64 = StandardNormal.sample(rng);
            *o = mu + sd * z;
        }
    }
}

/// Splits `total` into integer counts proportional to `weights` (largest remainder).
pub(crate) fn apportion(total: usize, weights: &[f64]) -> Vec<usize> {
    let sum: f64 = weights.iter().sum();
    if sum <= 0.0 || weights.is_empty() {
        return vec![0; weights.len()];
    }
    let exact: Vec<f64> = weights.iter().map(|w| w / sum * total as f64).collect();
    let mut counts: Vec<usize> = exact.iter().map(|e| (e + COUNT_SLACK).floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    counts
}

fn floor_count(rate: f64, n: usize) -> usize {
    (rate * n as f64 + COUNT_SLACK).floor() as usize
}

/// Draws `n` clean closed-set examples. Class counts follow the priors exactly
/// (largest remainder) and splits follow `spec.splits`.
pub fn generate_mixture(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.c * 10 {
        return Err(Error::config(format!(
            "need at least {} examples for {} classes, got {n}",
            spec.c * 10,
            spec.c
        )));
    }
    let mut rng = stream_rng(seed, streams::MIXTURE);
    let counts = apportion(n, &spec.class_priors);
    let mut labels: Vec<usize> = counts
        .iter()
        .enumerate()
        .flat_map(|(k, &m)| std::iter::repeat_n(k, m))
        .collect();
    labels.shuffle(&mut rng);

    let mut features = Array2::<f64>::zeros((n, spec.d));
    for (i, &y) in labels.iter().enumerate() {
        let row = features.row_mut(i);
        spec.sample_population(y, &mut rng, row.into_slice().expect("standard layout"));
    }

    let mut split_rng = stream_rng(seed, streams::SPLIT);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut split_rng);
    let n_test = floor_count(spec.splits.test, n);
    let n_val = floor_count(spec.splits.val, n - n_test);
    let mut split = vec![Split::Train; n];
    for &i in &order[..n_test] {
        split[i] = Split::Test;
    }
    for &i in &order[n_test..n_test + n_val] {
        split[i] = Split::Val;
    }
    Dataset::new(features, labels.clone(), labels, split, spec.c)
}

/// Samples `size` open-set feature vectors, spread evenly over the open populations.
pub fn generate_reservoir(spec: &MixtureSpec, size: usize, seed: u64) -> Result<Array2<f64>> {
    spec.validate()?;
    let p = spec.open_populations();
    if p == 0 && size > 0 {
        return Err(Error::config("mixture has no open-set populations"));
    }
    let mut rng = stream_rng(seed, streams::RESERVOIR);
    let mut out = Array2::<f64>::zeros((size, spec.d));
    for i in 0..size {
        let pop = spec.c + i % p.max(1);
        let row = out.row_mut(i);
        spec.sample_population(pop, &mut rng, row.into_slice().expect("standard layout"));
    }
    Ok(out)
}

/// Reservoir size implied by the spec for a dataset of `n` examples.
pub fn reservoir_size(spec: &MixtureSpec, n: usize) -> usize {
    (spec.open_fraction_reservoir * n as f64).ceil() as usize
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseStructure {
    ClassDependent,
    RegionDependent,
}

/// One feature region with its own closed-set flip law.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionNoise {
    /// Region membership is decided by the nearest centroid in feature space.
    pub centroid: Vec<f64>,
    /// Row-stochastic c×c matrix, `flip[i][j] = P(noisy = j | clean = i)`.
    pub flip: Vec<Vec<f64>>,
    /// Open-set proportion in this region; `floor(tau · rho · n_region)` examples are replaced.
    #[serde(default)]
    pub rho: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub tau: f64,
    pub rho: f64,
    pub structure: NoiseStructure,
    #[serde(default)]
    pub region_matrices: Vec<RegionNoise>,
    pub seed: u64,
    /// Give replaced (open-set) examples a uniformly drawn label instead of
    /// keeping the label of the example they replace.
    #[serde(default)]
    pub uniform_open_labels: bool,
}

impl NoiseSpec {
    pub fn class_dependent(tau: f64, rho: f64, seed: u64) -> Self {
        NoiseSpec {
            tau,
            rho,
            structure: NoiseStructure::ClassDependent,
            region_matrices: Vec::new(),
            seed,
            uniform_open_labels: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) || !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::config(format!(
                "noise rates must lie in [0, 1] (tau={}, rho={})",
                self.tau, self.rho
            )));
        }
        if self.structure == NoiseStructure::RegionDependent {
            if self.region_matrices.is_empty() {
                return Err(Error::config("region-dependent noise needs at least one region"));
            }
            for (r, region) in self.region_matrices.iter().enumerate() {
                if !(0.0..=1.0).contains(&region.rho) {
                    return Err(Error::config(format!("region {r}: rho outside [0, 1]")));
                }
                for (i, row) in region.flip.iter().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (sum - 1.0).abs() > 1e-9 {
                        return Err(Error::config(format!(
                            "region {r}: flip row {i} {row:?} is not a probability vector"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Closed-set flip probability conditioned on the clean label being closed.
    pub fn closed_flip_rate(&self) -> Result<f64> {
        let open = self.tau * self.rho;
        if open >= 1.0 {
            return Err(Error::Degenerate(
                "tau · rho = 1 leaves no closed-set instances".into(),
            ));
        }
        Ok(self.tau * (1.0 - self.rho) / (1.0 - open))
    }
}

fn ensure_clean(data: &Dataset) -> Result<()> {
    for i in 0..data.n() {
        if data.split[i] == Split::Test {
            continue;
        }
        if data.clean_labels[i] >= data.c || data.noisy_labels[i] != data.clean_labels[i] {
            return Err(Error::config(
                "noise injection expects a clean closed-set dataset (already corrupted?)",
            ));
        }
    }
    Ok(())
}

fn flip_symmetric(label: usize, c: usize, rng: &mut impl Rng) -> usize {
    let j = rng.random_range(0..c - 1);
    if j >= label {
        j + 1
    } else {
        j
    }
}

struct Replacer<'a> {
    reservoir: &'a Array2<f64>,
    order: Vec<usize>,
    next: usize,
    uniform_labels: bool,
}

impl<'a> Replacer<'a> {
    fn new(reservoir: &'a Array2<f64>, uniform_labels: bool, rng: &mut impl Rng) -> Self {
        let mut order: Vec<usize> = (0..reservoir.nrows()).collect();
        order.shuffle(rng);
        Replacer {
            reservoir,
            order,
            next: 0,
            uniform_labels,
        }
    }

    fn remaining(&self) -> usize {
        self.order.len() - self.next
    }

    fn replace(&mut self, out: &mut Dataset, i: usize, rng: &mut impl Rng) {
        let src = self.order[self.next];
        self.next += 1;
        out.features.row_mut(i).assign(&self.reservoir.row(src));
        out.clean_labels[i] = out.c;
        if self.uniform_labels {
            out.noisy_labels[i] = rng.random_range(0..out.c);
        }
    }
}

/// Replaces `floor(τρ·n)` examples of each of the train and val splits with
/// reservoir features (clean label becomes meta, noisy label kept) and flips a
/// disjoint `floor(τ(1−ρ)·n)` examples symmetrically. Test is left untouched.
pub fn inject_mixed_noise(data: &Dataset, spec: &NoiseSpec, reservoir: &Array2<f64>) -> Result<Dataset> {
    spec.validate()?;
    ensure_clean(data)?;
    let c = data.c;
    let plan: Vec<(Vec<usize>, usize, usize)> = [Split::Train, Split::Val]
        .into_iter()
        .map(|s| {
            let idx = data.indices(s);
            let n = idx.len();
            (idx, floor_count(spec.tau * spec.rho, n), floor_count(spec.tau * (1.0 - spec.rho), n))
        })
        .collect();
    for (idx, n_open, n_flip) in &plan {
        if n_open + n_flip > idx.len() {
            return Err(Error::config(format!(
                "{} corruptions requested for a split of {}",
                n_open + n_flip,
                idx.len()
            )));
        }
        if *n_flip > 0 && c < 2 {
            return Err(Error::config("symmetric flips need at least two classes"));
        }
    }
    let needed: usize = plan.iter().map(|p| p.1).sum();
    if reservoir.nrows() < needed {
        return Err(Error::Resource(format!(
            "reservoir holds {} open-set examples, {needed} required",
            reservoir.nrows()
        )));
    }
    if needed > 0 && reservoir.ncols() != data.d() {
        return Err(Error::shape(format!(
            "reservoir dimension {} differs from data dimension {}",
            reservoir.ncols(),
            data.d()
        )));
    }

    let mut rng = stream_rng(spec.seed, streams::NOISE);
    let mut out = data.clone();
    let mut replacer = Replacer::new(reservoir, spec.uniform_open_labels, &mut rng);
    for (mut idx, n_open, n_flip) in plan {
        idx.shuffle(&mut rng);
        for &i in &idx[..n_open] {
            replacer.replace(&mut out, i, &mut rng);
        }
        for &i in &idx[n_open..n_open + n_flip] {
            out.noisy_labels[i] = flip_symmetric(out.clean_labels[i], c, &mut rng);
        }
    }
    Ok(out)
}

/// Index of the nearest region centroid (squared Euclidean, ties to the lowest index).
pub fn region_of(regions: &[RegionNoise], x: ArrayView1<f64>) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (r, region) in regions.iter().enumerate() {
        let dist: f64 = x.iter().zip(&region.centroid).map(|(a, b)| (a - b).powi(2)).sum();
        if dist < best.0 {
            best = (dist, r);
        }
    }
    best.1
}

/// Region-dependent noise: each region replaces `floor(τ·ρ_r·n_r)` examples
/// with open-set features and flips the remaining labels by its own matrix,
/// using exact per-class counts.
pub fn inject_region_noise(
    data: &Dataset,
    spec: &NoiseSpec,
    reservoir: Option<&Array2<f64>>,
) -> Result<Dataset> {
    if spec.structure != NoiseStructure::RegionDependent {
        return Err(Error::config("inject_region_noise needs a region_dependent spec"));
    }
    spec.validate()?;
    ensure_clean(data)?;
    let c = data.c;
    for (r, region) in spec.region_matrices.iter().enumerate() {
        if region.centroid.len() != data.d() {
            return Err(Error::shape(format!("region {r} centroid has the wrong dimension")));
        }
        if region.flip.len() != c || region.flip.iter().any(|row| row.len() != c) {
            return Err(Error::shape(format!("region {r} flip matrix is not {c}×{c}")));
        }
    }
    let empty = Array2::<f64>::zeros((0, data.d()));
    let reservoir = reservoir.unwrap_or(&empty);
    let mut rng = stream_rng(spec.seed, streams::NOISE);
    let mut out = data.clone();
    let mut replacer = Replacer::new(reservoir, spec.uniform_open_labels, &mut rng);
    let regions = &spec.region_matrices;

    for s in [Split::Train, Split::Val] {
        let mut by_region: Vec<Vec<usize>> = vec![Vec::new(); regions.len()];
        for i in data.indices(s) {
            by_region[region_of(regions, data.features.row(i))].push(i);
        }
        for (r, mut idx) in by_region.into_iter().enumerate() {
            idx.shuffle(&mut rng);
            let n_open = floor_count(spec.tau * regions[r].rho, idx.len());
            if replacer.remaining() < n_open {
                return Err(Error::Resource(format!(
                    "reservoir exhausted in region {r}: {} left, {n_open} required",
                    replacer.remaining()
                )));
            }
            for &i in &idx[..n_open] {
                replacer.replace(&mut out, i, &mut rng);
            }
            let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for &i in &idx[n_open..] {
                by_class[data.clean_labels[i]].push(i);
            }
            for (class, members) in by_class.iter().enumerate() {
                let counts = apportion(members.len(), &regions[r].flip[class]);
                let mut cursor = 0;
                for (target, &m) in counts.iter().enumerate() {
                    for &i in &members[cursor..cursor + m] {
                        out.noisy_labels[i] = target;
                    }
                    cursor += m;
                }
            }
        }
    }
    Ok(out)
}

/// Analytic extended matrix for class-dependent symmetric noise with
/// label-preserving open-set replacement (meta row uniform).
pub fn true_extended_matrix(spec: &NoiseSpec, c: usize) -> Result<ExtendedTransitionMatrix> {
    true_extended_matrix_with_priors(spec, &vec![1.0 / c as f64; c])
}

/// As [`true_extended_matrix`], with the meta row equal to the label
/// distribution of replaced examples (the class priors).
pub fn true_extended_matrix_with_priors(
    spec: &NoiseSpec,
    priors: &[f64],
) -> Result<ExtendedTransitionMatrix> {
    if spec.structure != NoiseStructure::ClassDependent {
        return Err(Error::config("analytic matrix is defined for class_dependent noise only"));
    }
    spec.validate()?;
    let c = priors.len();
    if c == 0 {
        return Err(Error::config("class count must be positive"));
    }
    let flip = spec.closed_flip_rate()?;
    if c == 1 && flip > 0.0 {
        return Err(Error::config("symmetric flips need at least two classes"));
    }
    let mut entries = Array2::<f64>::zeros((c + 1, c));
    for i in 0..c {
        for j in 0..c {
            entries[[i, j]] = if i == j {
                1.0 - flip
            } else {
                flip / (c as f64 - 1.0)
            };
        }
    }
    let meta = if spec.uniform_open_labels {
        vec![1.0 / c as f64; c]
    } else {
        priors.to_vec()
    };
    entries.row_mut(c).assign(&Array1::from(meta));
    ExtendedTransitionMatrix::new(entries, Origin::True)
}

/// Ground-truth extended matrices of each region (meta row from the priors).
pub fn true_region_matrices(spec: &NoiseSpec, priors: &[f64]) -> Result<Vec<ExtendedTransitionMatrix>> {
    spec.validate()?;
    let c = priors.len();
    spec.region_matrices
        .iter()
        .map(|region| {
            let mut entries = Array2::<f64>::zeros((c + 1, c));
            for i in 0..c {
                for j in 0..c {
                    entries[[i, j]] = region.flip[i][j];
                }
            }
            let meta = if spec.uniform_open_labels {
                vec![1.0 / c as f64; c]
            } else {
                priors.to_vec()
            };
            entries.row_mut(c).assign(&Array1::from(meta));
            ExtendedTransitionMatrix::new(entries, Origin::True)
        })
        .collect()
}

/// Empirical `P(noisy = j | clean = i)` over the given examples, meta row included.
pub fn empirical_extended_matrix(data: &Dataset, idx: &[usize]) -> Result<ExtendedTransitionMatrix> {
    let c = data.c;
    let mut counts = Array2::<f64>::zeros((c + 1, c));
    for &i in idx {
        counts[[data.clean_labels[i], data.noisy_labels[i]]] += 1.0;
    }
    for (r, mut row) in counts.rows_mut().into_iter().enumerate() {
        let total = row.sum();
        if total == 0.0 {
            return Err(Error::Degenerate(format!("no examples with clean label {r}")));
        }
        row /= total;
    }
    ExtendedTransitionMatrix::new(counts, Origin::True)
}

/// Exact noisy posterior of a mixture under a known extended matrix; stands in
/// for a trained network when checking estimators against ground truth.
#[derive(Debug, Clone)]
pub struct OraclePosterior {
    pub spec: MixtureSpec,
    pub matrix: ExtendedTransitionMatrix,
    /// Prior mass of the meta class, `τρ` for the mixed-noise protocol.
    pub open_mass: f64,
}

impl OraclePosterior {
    pub fn new(spec: MixtureSpec, matrix: ExtendedTransitionMatrix, open_mass: f64) -> Result<Self> {
        spec.validate()?;
        if matrix.c() != spec.c {
            return Err(Error::shape("oracle matrix and mixture disagree on c"));
        }
        Ok(OraclePosterior {
            spec,
            matrix,
            open_mass,
        })
    }

    fn log_density(&self, pop: usize, x: ArrayView1<f64>) -> f64 {
        let s = self.spec.covariance_scale[pop];
        let dist: f64 = x.iter().zip(&self.spec.means[pop]).map(|(a, b)| (a - b).powi(2)).sum();
        -0.5 * dist / s - 0.5 * self.spec.d as f64 * (2.0 * std::f64::consts::PI * s).ln()
    }

    /// `P(Y | x)` over the `c` closed classes and the meta class.
    pub fn clean_posterior(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let c = self.spec.c;
        let p = self.spec.open_populations();
        let mut logs = Vec::with_capacity(c + 1);
        for i in 0..c {
            let prior = self.spec.class_priors[i] * (1.0 - self.open_mass);
            logs.push(prior.ln() + self.log_density(i, x));
        }
        if p > 0 && self.open_mass > 0.0 {
            let parts: Vec<f64> = (0..p)
                .map(|q| (self.open_mass / p as f64).ln() + self.log_density(c + q, x))
                .collect();
            logs.push(log_sum_exp(&parts));
        } else {
            logs.push(f64::NEG_INFINITY);
        }
        let norm = log_sum_exp(&logs);
        logs.iter().map(|l| (l - norm).exp()).collect()
    }
}

impl PosteriorModel for OraclePosterior {
    fn classes(&self) -> usize {
        self.spec.c
    }

    fn noisy_posterior(&self, x: ArrayView1<f64>) -> Vec<f64> {
        let g = self.clean_posterior(x);
        self.matrix
            .noisy_posterior(&g)
            .expect("oracle posterior has c + 1 entries")
    }
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}
