//! Experiment configuration: TOML file plus `--set section.key=value` overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mixnoise::robusttrain::RobustConfig;
use mixnoise::synthdata::{MixtureSpec, NoiseStructure, RegionNoise, SplitFractions};
use mixnoise::transition::EstimationConfig;
use mixnoise::{NoiseSpec, TrainConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Cluster counts for the reweighted runs; 1 is the single extended matrix.
    #[serde(default = "default_k_list")]
    pub k_list: Vec<usize>,
    pub mixture: MixtureConfig,
    pub noise: NoiseGrid,
    pub warmup: TrainConfig,
    #[serde(default)]
    pub estimation: EstimationConfig,
    /// Skeleton for every robust run; the objective is set per method.
    #[serde(default)]
    pub robust: RobustConfig,
}

fn default_k_list() -> Vec<usize> {
    vec![1]
}

/// Gaussian mixture layout. Without `means` the axis-aligned fixture with the
/// given `separation` is used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureConfig {
    pub n: usize,
    pub c: usize,
    pub d: usize,
    #[serde(default = "default_separation")]
    pub separation: f64,
    #[serde(default = "default_open_populations")]
    pub open_populations: usize,
    #[serde(default)]
    pub means: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    pub covariance_scale: Option<Vec<f64>>,
    #[serde(default)]
    pub class_priors: Option<Vec<f64>>,
    #[serde(default = "default_reservoir")]
    pub open_fraction_reservoir: f64,
    #[serde(default)]
    pub splits: SplitFractions,
}

fn default_separation() -> f64 {
    6.0
}

fn default_open_populations() -> usize {
    2
}

fn default_reservoir() -> f64 {
    1.0
}

impl MixtureConfig {
    pub fn spec(&self) -> Result<MixtureSpec, CliError> {
        let mut spec = match &self.means {
            None => MixtureSpec::separated(self.c, self.d, self.open_populations, self.separation)?,
            Some(means) => MixtureSpec {
                c: self.c,
                d: self.d,
                means: means.clone(),
                covariance_scale: vec![1.0; means.len()],
                class_priors: vec![1.0 / self.c as f64; self.c],
                open_fraction_reservoir: self.open_fraction_reservoir,
                splits: self.splits,
            },
        };
        if let Some(cov) = &self.covariance_scale {
            spec.covariance_scale = cov.clone();
        }
        if let Some(p) = &self.class_priors {
            spec.class_priors = p.clone();
        }
        spec.open_fraction_reservoir = self.open_fraction_reservoir;
        spec.splits = self.splits;
        spec.validate()?;
        Ok(spec)
    }
}

/// Noise cells: every `(tau, rho)` pair is one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseGrid {
    pub tau: Vec<f64>,
    pub rho: Vec<f64>,
    #[serde(default = "default_structure")]
    pub structure: NoiseStructure,
    /// Region laws for `region_dependent` noise.
    #[serde(default)]
    pub regions: Vec<RegionNoise>,
    #[serde(default)]
    pub uniform_open_labels: bool,
}

fn default_structure() -> NoiseStructure {
    NoiseStructure::ClassDependent
}

impl NoiseGrid {
    pub fn cells(&self) -> Vec<(f64, f64)> {
        self.tau
            .iter()
            .flat_map(|&t| self.rho.iter().map(move |&r| (t, r)))
            .collect()
    }

    pub fn spec(&self, tau: f64, rho: f64, seed: u64) -> NoiseSpec {
        NoiseSpec {
            tau,
            rho,
            structure: self.structure,
            region_matrices: self.regions.clone(),
            seed,
            uniform_open_labels: self.uniform_open_labels,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let empty = [
            ("seeds", self.seeds.is_empty()),
            ("k_list", self.k_list.is_empty()),
            ("noise.tau", self.noise.tau.is_empty()),
            ("noise.rho", self.noise.rho.is_empty()),
        ];
        if let Some((key, _)) = empty.iter().find(|(_, e)| *e) {
            return Err(CliError::Config(format!("`{key}` must not be empty")));
        }
        if self.k_list.contains(&0) {
            return Err(CliError::Config("`k_list` entries must be at least 1".into()));
        }
        if self.mixture.n == 0 {
            return Err(CliError::Config("`mixture.n` must be at least 1".into()));
        }
        self.mixture.spec()?;
        for (tau, rho) in self.noise.cells() {
            self.noise.spec(tau, rho, 0).validate()?;
        }
        self.warmup.validate()?;
        self.robust.train.validate()?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, output location excluded.
    pub fn digest(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        v.as_object_mut().expect("config is a table").remove("output_dir");
        let json = serde_json::to_vec(&v).expect("config serializes");
        let mut out = String::with_capacity(64);
        for b in Sha256::digest(json) {
            write!(out, "{b:02x}").expect("write to string");
        }
        out
    }

    /// Settings of one trial: every stage seed follows the trial seed.
    pub fn trial(&self, tau: f64, rho: f64, seed: u64) -> TrialSettings {
        let mut warmup = self.warmup.clone();
        warmup.seed = seed;
        let mut estimation = self.estimation.clone();
        estimation.seed = seed;
        let mut robust = self.robust.clone();
        robust.train.seed = seed;
        if let Some(r) = robust.revise.as_mut() {
            r.seed = seed;
        }
        TrialSettings {
            tau,
            rho,
            seed,
            noise: self.noise.spec(tau, rho, seed),
            warmup,
            estimation,
            robust,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrialSettings {
    pub tau: f64,
    pub rho: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub warmup: TrainConfig,
    pub estimation: EstimationConfig,
    pub robust: RobustConfig,
}

/// Reads `path`, applies the overrides in order and validates the result.
pub fn load(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read `{}`: {e}", path.display())))?;
    let mut table: toml::Table = text
        .parse()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

/// `section.key=value`; the value is read as TOML, falling back to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<(), CliError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("override key `{key}` is malformed")));
    }
    let (last, parents) = path.split_last().expect("nonempty");
    let mut node = table;
    for p in parents {
        node = node
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{p}` is not a section")))?;
    }
    node.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_nest_and_parse_values() {
        let mut t: toml::Table = "[warmup]\nepochs = 3\n".parse().unwrap();
        apply_override(&mut t, "warmup.epochs=7").unwrap();
        apply_override(&mut t, "noise.tau=[0.2, 0.4]").unwrap();
        apply_override(&mut t, "output_dir=runs/x").unwrap();
        assert_eq!(t["warmup"]["epochs"].as_integer(), Some(7));
        assert_eq!(t["noise"]["tau"].as_array().unwrap().len(), 2);
        assert_eq!(t["output_dir"].as_str(), Some("runs/x"));
        assert!(apply_override(&mut t, "novalue").is_err());
        assert!(apply_override(&mut t, "output_dir.x=1").is_err());
    }
}
