//! Pipeline stages of one trial. Each stage reads its upstream artifacts from
//! the trial directory and writes its own.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use mixnoise::evalstats::{accuracy, TrialReport};
use mixnoise::io::{self, ArtifactDir};
use mixnoise::netcore::train_warmup;
use mixnoise::robusttrain::{predict_split, train_robust};
use mixnoise::synthdata::{
    generate_mixture, generate_reservoir, inject_mixed_noise, inject_region_noise, region_of, reservoir_size,
    true_extended_matrix_with_priors, true_region_matrices, MixtureSpec, NoiseStructure,
};
use mixnoise::transition::{estimate_all, l1_error, routed_error, BlockErrors};
use mixnoise::{ClassifierParams, Dataset, ExtendedTransitionMatrix, LossKind, Split, TransitionBundle};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, TrialSettings};
use crate::manifest::Manifest;
use crate::CliError;

/// Robust-training method of one run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    Ce,
    Forward,
    Reweighted,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::Ce => "ce",
            MethodKind::Forward => "forward",
            MethodKind::Reweighted => "reweighted",
        }
    }

    fn loss(self) -> LossKind {
        match self {
            MethodKind::Ce => LossKind::Ce,
            MethodKind::Forward => LossKind::Forward,
            MethodKind::Reweighted => LossKind::Reweighted,
        }
    }
}

impl FromStr for MethodKind {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "ce" => Ok(MethodKind::Ce),
            "forward" => Ok(MethodKind::Forward),
            "reweighted" => Ok(MethodKind::Reweighted),
            _ => Err(CliError::Config(format!("unknown method `{s}` (ce, forward, reweighted)"))),
        }
    }
}

/// A method plus the cluster count of the matrices it trains against
/// (`None` for CE; forward always uses the single global matrix).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Method {
    pub kind: MethodKind,
    pub k: Option<usize>,
}

impl Method {
    pub fn new(kind: MethodKind, k: usize) -> Self {
        let k = match kind {
            MethodKind::Ce => None,
            MethodKind::Forward => Some(1),
            MethodKind::Reweighted => Some(k),
        };
        Method { kind, k }
    }

    /// Subdirectory of the trial holding this method's artifacts.
    pub fn dir_name(&self) -> String {
        match (self.kind, self.k) {
            (MethodKind::Reweighted, Some(k)) => format!("reweighted-k{k}"),
            (kind, _) => kind.as_str().to_string(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.dir_name())
    }
}

/// Trial report plus the cell and method it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub method: MethodKind,
    pub k: Option<usize>,
    pub tau: f64,
    pub rho: f64,
    #[serde(flatten)]
    pub report: TrialReport,
}

/// Estimation errors written next to a bundle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationRecord {
    pub k: usize,
    /// Errors of the matrix each train example is routed to.
    pub routed: BlockErrors,
    /// Errors of the single global matrix.
    pub global: BlockErrors,
    /// Per-matrix total error against the single ground truth (class-dependent noise only).
    pub per_cluster: Vec<f64>,
}

/// Directory name of a noise cell.
pub fn cell_name(tau: f64, rho: f64) -> String {
    format!("tau{tau}_rho{rho}")
}

pub struct Trial<'a> {
    pub cfg: &'a ExperimentConfig,
    pub settings: TrialSettings,
    pub dir: ArtifactDir,
    pub digest: String,
    pub manifest: &'a Manifest,
}

impl<'a> Trial<'a> {
    pub fn new(cfg: &'a ExperimentConfig, manifest: &'a Manifest, tau: f64, rho: f64, seed: u64) -> Self {
        let dir = cfg.output_dir.join(cell_name(tau, rho)).join(format!("seed{seed}"));
        Trial {
            cfg,
            settings: cfg.trial(tau, rho, seed),
            dir: ArtifactDir::new(dir),
            digest: cfg.digest(),
            manifest,
        }
    }

    fn mixture(&self) -> Result<MixtureSpec, CliError> {
        self.cfg.mixture.spec()
    }

    fn reservoir_path(&self) -> PathBuf {
        self.dir.root.join("reservoir.csv")
    }

    fn truth_path(&self) -> PathBuf {
        self.dir.root.join("truth.json")
    }

    fn warmup_history_path(&self) -> PathBuf {
        self.dir.root.join("warmup_history.csv")
    }

    fn bundle_dir(&self, k: usize) -> PathBuf {
        self.dir.root.join(format!("k{k}"))
    }

    pub fn estimation_path(&self, k: usize) -> PathBuf {
        self.bundle_dir(k).join("estimation.json")
    }

    fn method_dir(&self, m: Method) -> PathBuf {
        self.dir.root.join(m.dir_name())
    }

    pub fn report_path(&self, m: Method) -> PathBuf {
        self.method_dir(m).join("report.json")
    }

    /// Runs `body`, then appends its provenance record to the manifest.
    fn record<F>(&self, stage: &str, method: Option<Method>, body: F) -> Result<(), CliError>
    where
        F: FnOnce() -> Result<Vec<PathBuf>, CliError>,
    {
        let t0 = Instant::now();
        let artifacts = body()?;
        self.manifest.append(
            stage,
            &self.dir.root,
            &self.digest,
            &self.settings,
            method,
            &artifacts,
            t0.elapsed().as_secs_f64(),
        )
    }

    pub fn synth(&self) -> Result<(), CliError> {
        self.record("synth", None, || {
            let spec = self.mixture()?;
            let n = self.cfg.mixture.n;
            let seed = self.settings.seed;
            let clean = generate_mixture(&spec, n, seed)?;
            let reservoir = generate_reservoir(&spec, reservoir_size(&spec, n), seed)?;
            io::ensure_dir(&self.dir.root)?;
            let echo = serde_json::json!({ "mixture": spec, "n": n, "seed": seed });
            io::write_dataset(&self.dir.clean_data(), &clean, echo)?;
            io::write_matrix_csv(&self.reservoir_path(), &reservoir)?;
            Ok(vec![self.dir.clean_data(), self.reservoir_path()])
        })
    }

    pub fn corrupt(&self) -> Result<(), CliError> {
        self.record("corrupt", None, || {
            let (clean, _) = io::read_dataset(&self.dir.clean_data())?;
            let reservoir = io::read_matrix_csv(&self.reservoir_path(), clean.d())?;
            let spec = self.mixture()?;
            let noise = &self.settings.noise;
            let (noisy, truths) = match noise.structure {
                NoiseStructure::ClassDependent => (
                    inject_mixed_noise(&clean, noise, &reservoir)?,
                    vec![true_extended_matrix_with_priors(noise, &spec.class_priors)?],
                ),
                NoiseStructure::RegionDependent => (
                    inject_region_noise(&clean, noise, Some(&reservoir))?,
                    true_region_matrices(noise, &spec.class_priors)?,
                ),
            };
            let echo = serde_json::json!({ "mixture": spec, "noise": noise });
            io::write_dataset(&self.dir.data(), &noisy, echo)?;
            io::write_json(&self.truth_path(), &truths)?;
            Ok(vec![self.dir.data(), self.truth_path()])
        })
    }

    fn noisy_data(&self) -> Result<Dataset, CliError> {
        Ok(io::read_dataset(&self.dir.data())?.0)
    }

    fn warmup_model(&self) -> Result<ClassifierParams, CliError> {
        Ok(io::read_json(&self.dir.model())?)
    }

    pub fn warmup(&self) -> Result<(), CliError> {
        self.record("warmup", None, || {
            let data = self.noisy_data()?;
            let out = train_warmup(&data, &self.settings.warmup)?;
            io::write_json(&self.dir.model(), &out.params)?;
            io::write_history(&self.warmup_history_path(), &out.history)?;
            Ok(vec![self.dir.model(), self.warmup_history_path()])
        })
    }

    pub fn estimate(&self, k: usize) -> Result<(), CliError> {
        self.record("estimate", Some(Method::new(MethodKind::Reweighted, k)), || {
            let data = self.noisy_data()?;
            let warm = self.warmup_model()?;
            let truths: Vec<ExtendedTransitionMatrix> = io::read_json(&self.truth_path())?;
            let est = estimate_all(&warm, &data, k, &self.settings.estimation)?;
            let train = data.indices(Split::Train);
            let x = data.rows(&train);
            let truth_of: Vec<usize> = match self.settings.noise.structure {
                NoiseStructure::ClassDependent => vec![0; train.len()],
                NoiseStructure::RegionDependent => x
                    .rows()
                    .into_iter()
                    .map(|r| region_of(&self.settings.noise.region_matrices, r))
                    .collect(),
            };
            let global = TransitionBundle::single(est.global.clone());
            let record = EstimationRecord {
                k,
                routed: routed_error(&est.bundle, Some(&warm), x.view(), &truth_of, &truths)?,
                global: routed_error(&global, Some(&warm), x.view(), &truth_of, &truths)?,
                per_cluster: if truths.len() == 1 {
                    est.bundle
                        .matrices
                        .iter()
                        .map(|t| l1_error(t, &truths[0]))
                        .collect::<Result<_, _>>()?
                } else {
                    Vec::new()
                },
            };
            let dir = self.bundle_dir(k);
            io::ensure_dir(&dir)?;
            io::write_json(&self.dir.clusters(), &est.fine)?;
            io::write_json(&self.dir.transition(), &global)?;
            io::write_json(&dir.join("transition.json"), &est.bundle)?;
            io::write_json(&dir.join("anchors.json"), &est.anchors)?;
            io::write_json(&self.estimation_path(k), &record)?;
            Ok(vec![
                self.dir.clusters(),
                self.dir.transition(),
                dir.join("transition.json"),
                dir.join("anchors.json"),
                self.estimation_path(k),
            ])
        })
    }

    /// Bundle a method trains against.
    fn bundle_for(&self, m: Method) -> Result<Option<TransitionBundle>, CliError> {
        match (m.kind, m.k) {
            (MethodKind::Ce, _) => Ok(None),
            (MethodKind::Forward, _) | (MethodKind::Reweighted, Some(1)) => {
                Ok(Some(io::read_json(&self.dir.transition())?))
            }
            (MethodKind::Reweighted, Some(k)) => Ok(Some(io::read_json(&self.bundle_dir(k).join("transition.json"))?)),
            (MethodKind::Reweighted, None) => Err(CliError::Config("reweighted training needs k".into())),
        }
    }

    pub fn train(&self, m: Method) -> Result<(), CliError> {
        self.record("train", Some(m), || {
            let data = self.noisy_data()?;
            let bundle = self.bundle_for(m)?;
            let warm = match bundle.as_ref() {
                Some(b) if b.k() > 1 => Some(self.warmup_model()?),
                _ if self.settings.robust.warm_start => Some(self.warmup_model()?),
                _ => None,
            };
            let mut rc = self.settings.robust.clone();
            rc.objective = m.kind.loss();
            if m.kind != MethodKind::Reweighted {
                rc.revise = None;
            }
            let t0 = Instant::now();
            let out = train_robust(&data, bundle.as_ref(), warm.as_ref(), &rc)?;
            let seconds = t0.elapsed().as_secs_f64();
            let dir = self.method_dir(m);
            io::ensure_dir(&dir)?;
            let mut written = vec![dir.join("robust_model.json"), dir.join("history.csv"), dir.join("runtime.json")];
            io::write_json(&written[0], &out.params)?;
            io::write_history(&written[1], &out.history)?;
            io::write_json(&written[2], &serde_json::json!({ "seconds": seconds }))?;
            if rc.revise.is_some() {
                if let Some(b) = &out.bundle {
                    let path = dir.join("transition.json");
                    io::write_json(&path, b)?;
                    written.push(path);
                }
            }
            Ok(written)
        })
    }

    pub fn eval(&self, m: Method) -> Result<TrialRecord, CliError> {
        let mut result = None;
        self.record("eval", Some(m), || {
            let data = self.noisy_data()?;
            let dir = self.method_dir(m);
            let params: ClassifierParams = io::read_json(&dir.join("robust_model.json"))?;
            let rows = predict_split(&params, &data, Split::Test)?;
            let pred: Vec<usize> = rows.iter().map(|r| r.1).collect();
            let truth: Vec<usize> = rows.iter().map(|r| r.2).collect();
            let estimation: Option<EstimationRecord> = match m.k {
                Some(k) => Some(io::read_json(&self.estimation_path(k))?),
                None => None,
            };
            let runtime: serde_json::Value = io::read_json(&dir.join("runtime.json"))?;
            let record = TrialRecord {
                method: m.kind,
                k: m.k,
                tau: self.settings.tau,
                rho: self.settings.rho,
                report: TrialReport {
                    seed: self.settings.seed,
                    config_digest: self.digest.clone(),
                    test_accuracy: accuracy(&pred, &truth)?,
                    l1_error_global: estimation.as_ref().map(|e| e.routed.total),
                    l1_errors_per_cluster: estimation.map(|e| e.per_cluster).unwrap_or_default(),
                    runtime_seconds: runtime["seconds"].as_f64().unwrap_or(0.0),
                },
            };
            io::write_predictions(&self.dir.root.join(m.dir_name()).join("predictions.csv"), &rows)?;
            io::write_json(&self.report_path(m), &record)?;
            result = Some(record);
            Ok(vec![dir.join("predictions.csv"), self.report_path(m)])
        })?;
        Ok(result.expect("eval body ran"))
    }

    /// Every stage in order; returns one record per method.
    pub fn run_all(&self) -> Result<Vec<TrialRecord>, CliError> {
        self.synth()?;
        self.corrupt()?;
        self.warmup()?;
        let mut ks = self.cfg.k_list.clone();
        if !ks.contains(&1) {
            ks.insert(0, 1);
        }
        for &k in &ks {
            self.estimate(k)?;
        }
        let mut records = Vec::new();
        for m in methods(&self.cfg.k_list) {
            self.train(m)?;
            records.push(self.eval(m)?);
        }
        Ok(records)
    }
}

/// CE, forward, then reweighted for every `k`.
pub fn methods(k_list: &[usize]) -> Vec<Method> {
    let mut out = vec![Method::new(MethodKind::Ce, 1), Method::new(MethodKind::Forward, 1)];
    out.extend(k_list.iter().map(|&k| Method::new(MethodKind::Reweighted, k)));
    out
}

/// Relative path used in manifests and logs.
pub fn relative<'p>(root: &Path, path: &'p Path) -> &'p Path {
    path.strip_prefix(root).unwrap_or(path)
}
