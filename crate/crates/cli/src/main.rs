use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mixnoise::evalstats::{format_p, ttest_independent, Variance};
use mixnoise_cli::config::{self, ExperimentConfig};
use mixnoise_cli::experiment;
use mixnoise_cli::manifest::Manifest;
use mixnoise_cli::stages::{Method, MethodKind, Trial};
use mixnoise_cli::CliError;

#[derive(Parser)]
#[command(name = "mixnoise", version, about = "Mixed closed-set/open-set label noise pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sample clean mixtures and open-set reservoirs.
    Synth(StageArgs),
    /// Inject mixed label noise and write the ground-truth matrices.
    Corrupt(StageArgs),
    /// Train the warmup classifier on noisy labels.
    Warmup(StageArgs),
    /// Cluster, pick anchors and estimate the extended matrices.
    Estimate {
        #[command(flatten)]
        stage: StageArgs,
        /// Cluster counts to estimate (default: 1 plus `k_list`).
        #[arg(long, value_delimiter = ',')]
        k: Vec<usize>,
    },
    /// Train a robust classifier.
    Train(MethodArgs),
    /// Score a trained classifier on the test split.
    Eval(MethodArgs),
    /// Two-sample t-test, ad hoc (`--a`, `--b`) or reweighted vs CE over a finished experiment.
    Ttest {
        #[arg(long, conflicts_with_all = ["a", "b"])]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE", requires = "config")]
        overrides: Vec<String>,
        #[arg(long, value_delimiter = ',', requires = "b")]
        a: Vec<f64>,
        #[arg(long, value_delimiter = ',', requires = "a")]
        b: Vec<f64>,
        /// Unequal variances.
        #[arg(long)]
        welch: bool,
    },
    /// Run the full grid and write the summary tables.
    Experiment(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set warmup.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct StageArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Restrict to these noise rates / seeds (default: the whole grid).
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct MethodArgs {
    #[command(flatten)]
    stage: StageArgs,
    /// ce, forward or reweighted.
    #[arg(long)]
    method: MethodKind,
    /// Cluster count of the reweighted matrices.
    #[arg(long, default_value_t = 1)]
    k: usize,
}

impl StageArgs {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        config::load(&self.config.config, &self.config.overrides)
    }

    /// Selected `(tau, rho, seed)` trials in grid order.
    fn trials(&self, cfg: &ExperimentConfig) -> Result<Vec<(f64, f64, u64)>, CliError> {
        let out: Vec<(f64, f64, u64)> = cfg
            .noise
            .cells()
            .into_iter()
            .filter(|&(t, r)| self.tau.is_none_or(|x| x == t) && self.rho.is_none_or(|x| x == r))
            .flat_map(|(t, r)| cfg.seeds.iter().map(move |&s| (t, r, s)))
            .filter(|&(_, _, s)| self.seed.is_none_or(|x| x == s))
            .collect();
        if out.is_empty() {
            return Err(CliError::Config("no trial in the grid matches --tau/--rho/--seed".into()));
        }
        Ok(out)
    }

    fn each(&self, stage: impl Fn(&Trial) -> Result<(), CliError>) -> Result<(), CliError> {
        let cfg = self.load()?;
        let manifest = Manifest::new(&cfg.output_dir);
        for (tau, rho, seed) in self.trials(&cfg)? {
            stage(&Trial::new(&cfg, &manifest, tau, rho, seed))?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Synth(s) => s.each(|t| t.synth()),
        Command::Corrupt(s) => s.each(|t| t.corrupt()),
        Command::Warmup(s) => s.each(|t| t.warmup()),
        Command::Estimate { stage, k } => {
            if k.contains(&0) {
                return Err(CliError::Config("--k must be at least 1".into()));
            }
            stage.each(|t| {
                let ks = if k.is_empty() {
                    let mut ks = t.cfg.k_list.clone();
                    if !ks.contains(&1) {
                        ks.insert(0, 1);
                    }
                    ks
                } else {
                    k.clone()
                };
                ks.into_iter().try_for_each(|k| t.estimate(k))
            })
        }
        Command::Train(m) => {
            let method = method_of(&m)?;
            m.stage.each(|t| t.train(method))
        }
        Command::Eval(m) => {
            let method = method_of(&m)?;
            m.stage.each(|t| {
                let r = t.eval(method)?;
                println!(
                    "{method} tau={} rho={} seed={}: accuracy {:.4}",
                    r.tau, r.rho, r.report.seed, r.report.test_accuracy
                );
                Ok(())
            })
        }
        Command::Ttest {
            config,
            overrides,
            a,
            b,
            welch,
        } => match config {
            Some(path) => {
                let cfg = config::load(&path, &overrides)?;
                let records = experiment::collect_reports(&cfg)?;
                experiment::write_ttests(&cfg, &records)?;
                println!("{}", cfg.output_dir.join(experiment::TTEST_CSV).display());
                Ok(())
            }
            None if a.is_empty() => Err(CliError::Config("give --config or both --a and --b".into())),
            None => {
                let variance = if welch { Variance::Welch } else { Variance::Pooled };
                let t = ttest_independent(&a, &b, variance).map_err(|e| CliError::Config(e.to_string()))?;
                println!("t={} df={} p={} ({})", t.t, t.df, t.p, format_p(t.p));
                Ok(())
            }
        },
        Command::Experiment(c) => {
            let cfg = config::load(&c.config, &c.overrides)?;
            let summary = experiment::run(&cfg)?;
            println!("{}", cfg.output_dir.join(experiment::SUMMARY_CSV).display());
            if summary.complete() {
                Ok(())
            } else {
                Err(CliError::Trial(format!(
                    "{} trial(s) failed; incomplete cells are marked in {}",
                    summary.failures.len(),
                    experiment::SUMMARY_CSV
                )))
            }
        }
    }
}

fn method_of(m: &MethodArgs) -> Result<Method, CliError> {
    if m.k == 0 {
        return Err(CliError::Config("--k must be at least 1".into()));
    }
    Ok(Method::new(m.method, m.k))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("mixnoise: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
