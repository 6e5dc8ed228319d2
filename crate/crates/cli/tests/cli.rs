use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use mixnoise_cli::config;
use mixnoise_cli::stages::methods;

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn smoke_config() -> PathBuf {
    repo_root().join("configs/smoke.toml")
}

fn mixnoise(args: &[&str], threads: usize) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixnoise"))
        .args(args)
        .env("MIXNOISE_THREADS", threads.to_string())
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Smoke config pointed at `out`, with extra overrides.
fn smoke_args<'a>(cmd: &'a str, out: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v = vec![
        cmd.to_string(),
        "--config".into(),
        smoke_config().display().to_string(),
        "--set".into(),
        format!("output_dir={out}"),
    ];
    for e in extra {
        v.push("--set".into());
        v.push(e.to_string());
    }
    v
}

fn run_smoke(cmd: &str, out: &Path, extra: &[&str], threads: usize) -> Output {
    let out = out.display().to_string();
    let args = smoke_args(cmd, &out, extra);
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    mixnoise(&refs, threads)
}

fn strip_runtime(v: &mut serde_json::Value) {
    match v {
        serde_json::Value::Object(map) => {
            map.retain(|k, _| !matches!(k.as_str(), "runtime_seconds" | "seconds"));
            map.values_mut().for_each(strip_runtime);
        }
        serde_json::Value::Array(items) => items.iter_mut().for_each(strip_runtime),
        _ => {}
    }
}

/// Every artifact under `root` keyed by relative path, with wall-clock content removed.
fn snapshot(root: &Path) -> BTreeMap<PathBuf, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            let name = rel.file_name().unwrap().to_str().unwrap().to_string();
            if name == "manifest.jsonl" {
                continue;
            }
            let text = fs::read_to_string(&path).unwrap();
            let text = if name.ends_with(".json") {
                let mut v: serde_json::Value = serde_json::from_str(&text).unwrap();
                strip_runtime(&mut v);
                v.to_string()
            } else if name.ends_with(".jsonl") {
                text.lines()
                    .map(|l| {
                        let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                        strip_runtime(&mut v);
                        v.to_string()
                    })
                    .collect::<Vec<_>>()
                    .join("\n")
            } else if name == "summary.csv" {
                text.lines()
                    .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
                    .collect::<Vec<_>>()
                    .join("\n")
            } else {
                text
            };
            out.insert(rel, text);
        }
    }
    out
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap().split(',').map(str::to_string).collect();
    let rows = lines.map(|l| l.split(',').map(str::to_string).collect()).collect();
    (header, rows)
}

#[test]
fn smoke_experiment_finishes_within_a_minute() {
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let out = run_smoke("experiment", dir.path(), &[], 1);
    let secs = t0.elapsed().as_secs_f64();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(secs < 60.0, "smoke experiment took {secs:.1}s");
    for f in ["summary.csv", "summary.json", "estimation_error.csv", "ttest.csv", "reports.jsonl", "manifest.jsonl"] {
        assert!(dir.path().join(f).exists(), "{f} missing");
    }
    let (header, rows) = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(header[..4], ["method", "k", "tau", "rho"]);
    let labels: Vec<String> = rows.iter().map(|r| format!("{}{}", r[0], r[1])).collect();
    assert_eq!(labels, ["ce", "forward1", "reweighted1", "reweighted2"]);
    let trial = dir.path().join("tau0.4_rho0.5/seed1");
    for f in [
        "model.json",
        "clusters.json",
        "transition.json",
        "k2/transition.json",
        "reweighted-k2/history.csv",
        "reweighted-k2/predictions.csv",
        "reweighted-k2/report.json",
    ] {
        assert!(trial.join(f).exists(), "{f} missing");
    }
    let (h, _) = csv_rows(&trial.join("reweighted-k2/history.csv"));
    assert_eq!(h, ["epoch", "train_loss", "val_loss", "floor_rate", "lr"]);
    let (h, _) = csv_rows(&trial.join("ce/predictions.csv"));
    assert_eq!(h, ["index", "predicted", "true"]);
}

#[test]
fn estimation_error_has_one_row_per_cell_k_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_smoke(
        "experiment",
        dir.path(),
        &["noise.tau=[0.2, 0.4]", "seeds=[1, 2]", "k_list=[1, 2]", "warmup.epochs=3", "robust.train.epochs=2"],
        1,
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let (header, rows) = csv_rows(&dir.path().join("estimation_error.csv"));
    assert_eq!(header, ["tau", "rho", "k", "seed", "err_T", "err_Tmeta", "err_Tstar"]);
    assert_eq!(rows.len(), 2 * 2 * 2);
    for r in &rows {
        let v: Vec<f64> = r[4..].iter().map(|x| x.parse().unwrap()).collect();
        assert!((v[0] + v[1] - v[2]).abs() < 1e-9, "closed + meta = total");
    }
    // 2 cells x 2 seeds: every k for reweighted, plus CE and forward
    let reports = fs::read_to_string(dir.path().join("reports.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = reports.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.iter().filter(|r| r["method"] == "reweighted").count(), 2 * 2 * 2);
    assert_eq!(records.len(), 2 * 2 * (2 + 2));
    let (header, rows) = csv_rows(&dir.path().join("ttest.csv"));
    assert_eq!(header[..5], ["baseline", "method", "tau", "rho", "k"]);
    assert_eq!(rows.len(), 2 * 2);
    for r in &rows {
        let p: f64 = r[11].parse().unwrap();
        assert!((0.0..=1.0).contains(&p));
    }
}

#[test]
fn full_grid_plans_180_reweighted_reports() {
    let cfg = config::load(&repo_root().join("configs/grid.toml"), &[]).unwrap();
    let cells = cfg.noise.cells().len();
    assert_eq!(cells, 4 * 3);
    assert_eq!(cells * cfg.seeds.len() * cfg.k_list.len(), 180);
    // plus the CE and forward baselines in every trial
    assert_eq!(cells * cfg.seeds.len() * methods(&cfg.k_list).len(), 180 + 2 * 60);
}

#[test]
fn reruns_are_bit_identical() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let extra = ["seeds=[1, 2]", "warmup.epochs=5", "robust.train.epochs=3"];
    assert!(run_smoke("experiment", a.path(), &extra, 1).status.success());
    assert!(run_smoke("experiment", b.path(), &extra, 1).status.success());
    assert!(run_smoke("experiment", c.path(), &extra, 2).status.success());
    let (sa, sb, sc) = (snapshot(a.path()), snapshot(b.path()), snapshot(c.path()));
    assert!(sa.len() > 40);
    assert_eq!(sa, sb);
    assert_eq!(sa, sc, "parallel trials changed numeric content");

    // a single stage rerun on unchanged inputs rewrites the same bytes
    let model = a.path().join("tau0.4_rho0.5/seed1/model.json");
    let before = fs::read(&model).unwrap();
    let out = run_smoke("warmup", a.path(), &["warmup.epochs=5", "seeds=[1, 2]"], 1);
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(fs::read(&model).unwrap(), before);
}

#[test]
fn estimate_before_warmup_names_the_missing_model() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_smoke("synth", dir.path(), &[], 1).status.success());
    assert!(run_smoke("corrupt", dir.path(), &[], 1).status.success());
    let out = run_smoke("estimate", dir.path(), &[], 1);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains("model.json"), "{}", stderr(&out));
}

#[test]
fn stages_run_one_by_one() {
    let dir = tempfile::tempdir().unwrap();
    let extra = ["warmup.epochs=3", "robust.train.epochs=2"];
    for cmd in ["synth", "corrupt", "warmup", "estimate"] {
        let out = run_smoke(cmd, dir.path(), &extra, 1);
        assert!(out.status.success(), "{cmd}: {}", stderr(&out));
    }
    let d = dir.path().display().to_string();
    let mut args = smoke_args("train", &d, &extra);
    args.extend(["--method", "reweighted", "--k", "2", "--seed", "1"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    assert!(mixnoise(&refs, 1).status.success());
    let mut args = smoke_args("eval", &d, &extra);
    args.extend(["--method", "reweighted", "--k", "2"].map(String::from));
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    let out = mixnoise(&refs, 1);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(String::from_utf8_lossy(&out.stdout).contains("accuracy"));
    let manifest = mixnoise_cli::manifest::read(&dir.path().join("manifest.jsonl")).unwrap();
    let stages: Vec<&str> = manifest.iter().map(|r| r.stage.as_str()).collect();
    assert_eq!(stages, ["synth", "corrupt", "warmup", "estimate", "estimate", "train", "eval"]);
    assert!(manifest.iter().all(|r| r.config_digest.len() == 64 && r.seed == 1 && !r.git_describe.is_empty()));
}

#[test]
fn configuration_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    for bad in ["seeds=[]", "k_list=[0]", "noise.tau=[]", "warmup.unknown_key=1"] {
        let out = run_smoke("experiment", dir.path(), &[bad], 1);
        assert_eq!(out.status.code(), Some(2), "{bad}: {}", stderr(&out));
    }
    let out = mixnoise(&["synth", "--config", "/nonexistent.toml"], 1);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn failed_trials_exit_with_4() {
    let dir = tempfile::tempdir().unwrap();
    // a reservoir of 20 points cannot supply 320 open-set replacements
    let out = run_smoke("experiment", dir.path(), &["mixture.open_fraction_reservoir=0.01"], 1);
    assert_eq!(out.status.code(), Some(4), "{}", stderr(&out));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["failures"].as_array().unwrap().len(), 1);
    let (_, rows) = csv_rows(&dir.path().join("summary.csv"));
    assert_eq!(rows.len(), 4);
    assert!(rows.iter().all(|r| r[4] == "0" && r[5] == "false"));
}

#[test]
fn ad_hoc_ttest_matches_reference() {
    let out = mixnoise(&["ttest", "--a", "1,2,3", "--b", "4,5,6"], 1);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("df=4") && text.contains("(0.0213)"), "{text}");
    assert!(text.starts_with("t=-3.67423"), "{text}");
}
