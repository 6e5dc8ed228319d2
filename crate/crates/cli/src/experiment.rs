//! Grid runner and the summary tables built from trial reports.

use std::collections::BTreeMap;
use std::sync::Mutex;

use mixnoise::evalstats::{aggregate, format_p, ttest_independent, Stat, Summary, TrialReport, Variance};
use mixnoise::io::{self, fmt_f64};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::manifest::Manifest;
use crate::stages::{methods, EstimationRecord, Method, MethodKind, Trial, TrialRecord};
use crate::CliError;

pub const SUMMARY_CSV: &str = "summary.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const ESTIMATION_CSV: &str = "estimation_error.csv";
pub const TTEST_CSV: &str = "ttest.csv";
pub const REPORTS_JSONL: &str = "reports.jsonl";

type TrialResult = Result<Vec<TrialRecord>, CliError>;

/// Parallel trial cap from `MIXNOISE_THREADS` (default 1).
pub fn thread_cap() -> usize {
    std::env::var("MIXNOISE_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .filter(|&n: &usize| n > 0)
        .unwrap_or(1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialFailure {
    pub tau: f64,
    pub rho: f64,
    pub seed: u64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub method: MethodKind,
    pub k: Option<usize>,
    pub tau: f64,
    pub rho: f64,
    /// Every configured seed produced a report.
    pub complete: bool,
    pub trials: usize,
    /// Absent when no trial of the cell finished.
    pub summary: Option<Summary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub config_digest: String,
    pub cells: Vec<CellSummary>,
    pub failures: Vec<TrialFailure>,
}

impl ExperimentSummary {
    pub fn complete(&self) -> bool {
        self.failures.is_empty() && self.cells.iter().all(|c| c.complete)
    }
}

/// Runs every `(tau, rho, seed)` trial, then writes the summary tables.
pub fn run(cfg: &ExperimentConfig) -> Result<ExperimentSummary, CliError> {
    io::ensure_dir(&cfg.output_dir)?;
    let manifest = Manifest::new(&cfg.output_dir);
    let jobs: Vec<(f64, f64, u64)> = cfg
        .noise
        .cells()
        .into_iter()
        .flat_map(|(t, r)| cfg.seeds.iter().map(move |&s| (t, r, s)))
        .collect();
    let next = Mutex::new(0usize);
    let results: Mutex<Vec<(usize, TrialResult)>> = Mutex::new(Vec::new());
    std::thread::scope(|scope| {
        for _ in 0..thread_cap().min(jobs.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap_or_else(|e| e.into_inner());
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(&(tau, rho, seed)) = jobs.get(i) else { break };
                log::info!("trial tau={tau} rho={rho} seed={seed}");
                let out = Trial::new(cfg, &manifest, tau, rho, seed).run_all();
                results.lock().unwrap_or_else(|e| e.into_inner()).push((i, out));
            });
        }
    });
    let mut results = results.into_inner().unwrap_or_else(|e| e.into_inner());
    results.sort_by_key(|(i, _)| *i);
    let mut records = Vec::new();
    let mut failures = Vec::new();
    for (i, r) in results {
        let (tau, rho, seed) = jobs[i];
        match r {
            Ok(recs) => records.extend(recs),
            Err(e) => {
                log::error!("trial tau={tau} rho={rho} seed={seed} failed: {e}");
                failures.push(TrialFailure {
                    tau,
                    rho,
                    seed,
                    error: e.to_string(),
                });
            }
        }
    }
    write_reports(cfg, &records)?;
    let summary = summarize(cfg, &records, failures)?;
    write_summary(cfg, &summary)?;
    write_estimation_errors(cfg)?;
    write_ttests(cfg, &records)?;
    Ok(summary)
}

fn write_reports(cfg: &ExperimentConfig, records: &[TrialRecord]) -> Result<(), CliError> {
    let path = cfg.output_dir.join(REPORTS_JSONL);
    let mut text = String::new();
    for r in records {
        text.push_str(&serde_json::to_string(r).expect("record serializes"));
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| CliError::Trial(format!("{}: {e}", path.display())))
}

type CellKey = (Method, u64, u64);

fn cell_key(m: Method, tau: f64, rho: f64) -> CellKey {
    (m, tau.to_bits(), rho.to_bits())
}

/// Groups reports by method and cell, in configuration order.
fn grouped<'r>(cfg: &ExperimentConfig, records: &'r [TrialRecord]) -> Vec<(Method, f64, f64, Vec<&'r TrialReport>)> {
    let mut by: BTreeMap<CellKey, Vec<&TrialRecord>> = BTreeMap::new();
    for r in records {
        let m = Method { kind: r.method, k: r.k };
        by.entry(cell_key(m, r.tau, r.rho)).or_default().push(r);
    }
    let mut out = Vec::new();
    for m in methods(&cfg.k_list) {
        for (tau, rho) in cfg.noise.cells() {
            let mut reps: Vec<&TrialRecord> = by.remove(&cell_key(m, tau, rho)).unwrap_or_default();
            reps.sort_by_key(|r| r.report.seed);
            out.push((m, tau, rho, reps.into_iter().map(|r| &r.report).collect()));
        }
    }
    out
}

pub fn summarize(
    cfg: &ExperimentConfig,
    records: &[TrialRecord],
    failures: Vec<TrialFailure>,
) -> Result<ExperimentSummary, CliError> {
    let mut cells = Vec::new();
    for (m, tau, rho, reps) in grouped(cfg, records) {
        let owned: Vec<TrialReport> = reps.into_iter().cloned().collect();
        cells.push(CellSummary {
            method: m.kind,
            k: m.k,
            tau,
            rho,
            complete: owned.len() == cfg.seeds.len(),
            trials: owned.len(),
            summary: if owned.is_empty() { None } else { Some(aggregate(&owned)?) },
        });
    }
    Ok(ExperimentSummary {
        config_digest: cfg.digest(),
        cells,
        failures,
    })
}

fn opt_k(k: Option<usize>) -> String {
    k.map(|k| k.to_string()).unwrap_or_default()
}

fn stat_cols(s: Option<Stat>) -> [String; 2] {
    match s {
        Some(s) => [fmt_f64(s.mean), fmt_f64(s.std)],
        None => [String::new(), String::new()],
    }
}

pub fn write_summary(cfg: &ExperimentConfig, summary: &ExperimentSummary) -> Result<(), CliError> {
    io::write_json(&cfg.output_dir.join(SUMMARY_JSON), summary)?;
    io::write_csv(
        &cfg.output_dir.join(SUMMARY_CSV),
        &[
            "method",
            "k",
            "tau",
            "rho",
            "trials",
            "complete",
            "accuracy",
            "accuracy_mean",
            "accuracy_std",
            "l1_error_mean",
            "l1_error_std",
            "runtime_seconds_mean",
        ],
        summary.cells.iter().map(|c| {
            let s = c.summary.as_ref();
            let [acc_m, acc_s] = stat_cols(s.map(|s| s.accuracy));
            let [l1_m, l1_s] = stat_cols(s.and_then(|s| s.l1_error_global));
            vec![
                c.method.as_str().to_string(),
                opt_k(c.k),
                c.tau.to_string(),
                c.rho.to_string(),
                c.trials.to_string(),
                c.complete.to_string(),
                s.map(|s| s.accuracy.percent()).unwrap_or_default(),
                acc_m,
                acc_s,
                l1_m,
                l1_s,
                s.map(|s| fmt_f64(s.runtime_seconds.mean)).unwrap_or_default(),
            ]
        }),
    )?;
    Ok(())
}

/// One row per `(tau, rho, k, seed)` with an estimation record on disk.
pub fn write_estimation_errors(cfg: &ExperimentConfig) -> Result<(), CliError> {
    let manifest = Manifest::new(&cfg.output_dir);
    let mut rows = Vec::new();
    for (tau, rho) in cfg.noise.cells() {
        for &k in &cfg.k_list {
            for &seed in &cfg.seeds {
                let trial = Trial::new(cfg, &manifest, tau, rho, seed);
                let path = trial.estimation_path(k);
                if !path.exists() {
                    continue;
                }
                let e: EstimationRecord = io::read_json(&path)?;
                rows.push(vec![
                    tau.to_string(),
                    rho.to_string(),
                    k.to_string(),
                    seed.to_string(),
                    fmt_f64(e.routed.closed),
                    fmt_f64(e.routed.meta),
                    fmt_f64(e.routed.total),
                ]);
            }
        }
    }
    io::write_csv(
        &cfg.output_dir.join(ESTIMATION_CSV),
        &["tau", "rho", "k", "seed", "err_T", "err_Tmeta", "err_Tstar"],
        rows,
    )?;
    Ok(())
}

/// Reweighted (every `k`) against CE in each cell, over the seeds both finished.
pub fn write_ttests(cfg: &ExperimentConfig, records: &[TrialRecord]) -> Result<(), CliError> {
    let groups = grouped(cfg, records);
    let find = |m: Method, tau: f64, rho: f64| -> BTreeMap<u64, f64> {
        groups
            .iter()
            .find(|(gm, t, r, _)| *gm == m && t.to_bits() == tau.to_bits() && r.to_bits() == rho.to_bits())
            .map(|(_, _, _, reps)| reps.iter().map(|r| (r.seed, r.test_accuracy)).collect())
            .unwrap_or_default()
    };
    let mut rows = Vec::new();
    for (tau, rho) in cfg.noise.cells() {
        let ce = find(Method::new(MethodKind::Ce, 1), tau, rho);
        for &k in &cfg.k_list {
            let rw = find(Method::new(MethodKind::Reweighted, k), tau, rho);
            let a: Vec<f64> = rw.values().copied().collect();
            let b: Vec<f64> = ce.values().copied().collect();
            let mut row = vec![
                "ce".to_string(),
                Method::new(MethodKind::Reweighted, k).dir_name(),
                tau.to_string(),
                rho.to_string(),
                k.to_string(),
                a.len().to_string(),
                b.len().to_string(),
            ];
            match ttest_independent(&a, &b, Variance::Pooled) {
                Ok(t) => row.extend([
                    fmt_f64(Stat::of(&a).map_or(f64::NAN, |s| s.mean)),
                    fmt_f64(Stat::of(&b).map_or(f64::NAN, |s| s.mean)),
                    fmt_f64(t.t),
                    fmt_f64(t.df),
                    fmt_f64(t.p),
                    format_p(t.p),
                ]),
                // fewer than two seeds: the test is undefined
                Err(_) => row.extend(std::iter::repeat_n(String::new(), 6)),
            }
            rows.push(row);
        }
    }
    io::write_csv(
        &cfg.output_dir.join(TTEST_CSV),
        &[
            "baseline",
            "method",
            "tau",
            "rho",
            "k",
            "n_reweighted",
            "n_ce",
            "mean_reweighted",
            "mean_ce",
            "t",
            "df",
            "p",
            "p_rounded",
        ],
        rows,
    )?;
    Ok(())
}

/// Reports already on disk for every configured trial and method.
pub fn collect_reports(cfg: &ExperimentConfig) -> Result<Vec<TrialRecord>, CliError> {
    let manifest = Manifest::new(&cfg.output_dir);
    let mut out = Vec::new();
    for (tau, rho) in cfg.noise.cells() {
        for &seed in &cfg.seeds {
            let trial = Trial::new(cfg, &manifest, tau, rho, seed);
            for m in methods(&cfg.k_list) {
                let path = trial.report_path(m);
                if path.exists() {
                    out.push(io::read_json(&path)?);
                }
            }
        }
    }
    Ok(out)
}
