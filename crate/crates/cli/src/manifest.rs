//! Append-only provenance log, one JSON object per line.

use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Mutex;
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::config::TrialSettings;
use crate::stages::{relative, Method};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub stage: String,
    /// Trial directory, relative to the output directory.
    pub trial: PathBuf,
    pub method: Option<String>,
    pub config_digest: String,
    pub seed: u64,
    pub tau: f64,
    pub rho: f64,
    pub git_describe: String,
    pub wall_seconds: f64,
    pub finished_unix: u64,
    pub artifacts: Vec<PathBuf>,
}

pub struct Manifest {
    root: PathBuf,
    git: String,
    lock: Mutex<()>,
}

impl Manifest {
    pub fn new(root: &Path) -> Self {
        Manifest {
            root: root.to_path_buf(),
            git: git_describe(),
            lock: Mutex::new(()),
        }
    }

    pub fn path(&self) -> PathBuf {
        self.root.join("manifest.jsonl")
    }

    #[allow(clippy::too_many_arguments)]
    pub fn append(
        &self,
        stage: &str,
        trial: &Path,
        digest: &str,
        settings: &TrialSettings,
        method: Option<Method>,
        artifacts: &[PathBuf],
        wall_seconds: f64,
    ) -> Result<(), CliError> {
        let record = ManifestRecord {
            stage: stage.to_string(),
            trial: relative(&self.root, trial).to_path_buf(),
            method: method.map(|m| m.dir_name()),
            config_digest: digest.to_string(),
            seed: settings.seed,
            tau: settings.tau,
            rho: settings.rho,
            git_describe: self.git.clone(),
            wall_seconds,
            finished_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
            artifacts: artifacts.iter().map(|a| relative(&self.root, a).to_path_buf()).collect(),
        };
        let line = serde_json::to_string(&record).expect("record serializes");
        let path = self.path();
        let _guard = self.lock.lock().unwrap_or_else(|e| e.into_inner());
        std::fs::create_dir_all(&self.root).map_err(|e| CliError::Trial(format!("{}: {e}", self.root.display())))?;
        let mut f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| CliError::Trial(format!("{}: {e}", path.display())))?;
        writeln!(f, "{line}").map_err(|e| CliError::Trial(format!("{}: {e}", path.display())))
    }
}

/// `git describe --always --dirty`, or `unknown` outside a repository.
fn git_describe() -> String {
    Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .unwrap_or_else(|| "unknown".to_string())
}

pub fn read(path: &Path) -> Result<Vec<ManifestRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Trial(format!("{}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Trial(format!("{}: {e}", path.display()))))
        .collect()
}
