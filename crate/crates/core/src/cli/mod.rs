//! Run configuration, experiment driver, artifact export and the operator
//! command line.

mod artifacts;
mod config;
mod runner;
mod verify;

pub use artifacts::{write_grid_results, write_run_artifacts, write_summary, RESULT_COLUMNS};
pub use config::{parse_config, parse_config_str, EncoderConfig, ProtocolConfig, ProtocolKind, RunConfig};
pub use runner::{build_environment, run_experiment, run_id, Environment, FederatedRound, RunOutput, RunResult};
pub use verify::{run_verify, PropertyReport, VerifyOptions};

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::eval::{run_ablation_grid, summarize, GridSpec, Variant};

pub const OUTPUT_ROOT_ENV: &str = "NIAM_OUTPUT_ROOT";

pub const EXIT_OK: u8 = 0;
pub const EXIT_PROPERTY_FAILURE: u8 = 1;
pub const EXIT_EXECUTION_ERROR: u8 = 2;

#[derive(Debug, thiserror::Error)]
pub enum RunError {
    #[error("config: {0}")]
    Config(String),
    #[error("io: {0}")]
    Io(String),
    #[error("{stage}: {message}")]
    Stage { stage: &'static str, message: String },
}

impl RunError {
    pub(crate) fn stage<E: std::fmt::Display>(stage: &'static str) -> impl Fn(E) -> RunError {
        move |e| RunError::Stage {
            stage,
            message: e.to_string(),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "niam-fpl", version, about = "One-shot federated prompt learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply for anything missing.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set federation.beta=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Master seed (shorthand for `--set seed=N`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Artifact directory (shorthand for `--set output_dir=PATH`).
    #[arg(short, long)]
    pub output: Option<PathBuf>,
    /// Root that relative output directories resolve against.
    #[arg(long, env = OUTPUT_ROOT_ENV, default_value = "results")]
    pub output_root: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, RunError> {
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(format!("seed={seed}"));
        }
        let mut config = parse_config(self.config.as_deref(), &overrides)?;
        if let Some(out) = &self.output {
            config.output_dir = Some(out.clone());
        }
        Ok(config)
    }

    fn resolve(&self, config: &RunConfig, fallback: &str) -> PathBuf {
        let dir = config
            .output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from(fallback));
        if dir.is_absolute() {
            dir
        } else {
            self.output_root.join(dir)
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment and write its artifacts.
    Run(ConfigArgs),
    /// Run an ablation grid and write long-format and summary tables.
    Ablate {
        #[command(flatten)]
        config: ConfigArgs,
        /// TOML grid spec with `variants`, `lambdas`, `prototypes`, `seeds`.
        #[arg(long)]
        grid: Option<PathBuf>,
        /// Comma-separated λ values.
        #[arg(long, value_delimiter = ',')]
        lambdas: Vec<f64>,
        /// Comma-separated prototype counts.
        #[arg(long, value_delimiter = ',')]
        prototypes: Vec<usize>,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        /// Use the standard mechanism variants instead of the config's flags.
        #[arg(long)]
        standard_variants: bool,
    },
    /// Check the core invariants and print one line per property.
    Verify {
        /// Deliberately mishandle λ to confirm the suite notices.
        #[arg(long)]
        corrupt_lambda: bool,
    },
}

pub fn cmd_run(args: &ConfigArgs) -> Result<PathBuf, RunError> {
    let config = args.load()?;
    let out = run_experiment(&config)?;
    let dir = args.resolve(&config, &format!("run-{}", out.result.run_id));
    write_run_artifacts(&dir, &out)?;
    let m = &out.result.metrics;
    println!("run {} seed {}", out.result.run_id, out.result.seed);
    if let (Some(b), Some(n), Some(h)) = (m.acc_base, m.acc_novel, m.hm) {
        println!("acc_base {b:.2}  acc_novel {n:.2}  hm {h:.2}");
    }
    for (d, acc) in &m.per_domain {
        println!("domain {d}: {acc:.2}");
    }
    println!("comm_volume {:.1} floats/client", m.comm_volume);
    println!("artifacts in {}", dir.display());
    Ok(dir)
}


pub fn load_grid(
    path: Option<&Path>,
    lambdas: &[f64],
    prototypes: &[usize],
    seeds: &[u64],
    standard_variants: bool,
) -> Result<GridSpec, RunError> {
    let mut spec: GridSpec = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| RunError::Config(format!("{}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| RunError::Config(e.to_string()))?
        }
        None => GridSpec::default(),
    };
    if !lambdas.is_empty() {
        spec.lambdas = lambdas.to_vec();
    }
    if !prototypes.is_empty() {
        spec.prototypes = prototypes.to_vec();
    }
    if !seeds.is_empty() {
        spec.seeds = seeds.to_vec();
    }
    if standard_variants {
        spec.variants = Variant::standard();
    }
    Ok(spec)
}

/// Returns the output directory and the number of failed cells.
pub fn cmd_ablate(args: &ConfigArgs, spec: &GridSpec) -> Result<(PathBuf, usize), RunError> {
    let base = args.load()?;
    let dir = args.resolve(&base, &format!("ablate-{}", run_id(&base)));
    std::fs::create_dir_all(&dir).map_err(|e| RunError::Io(format!("{}: {e}", dir.display())))?;
    let rows = run_ablation_grid(&base, spec);
    let domains = base.task.domains.len();
    write_grid_results(&dir.join("results.csv"), &rows, domains)?;
    let cell_key = |c: &crate::eval::GridCell| format!("{}|lambda={}|n={}", c.variant, c.lambda, c.prototypes);
    write_summary(&dir.join("summary.csv"), "cell", &summarize(&rows, cell_key))?;
    write_summary(&dir.join("summary_variant.csv"), "variant", &summarize(&rows, |c| c.variant.clone()))?;
    write_summary(&dir.join("summary_lambda.csv"), "lambda", &summarize(&rows, |c| c.lambda.to_string()))?;
    write_summary(&dir.join("summary_n.csv"), "n", &summarize(&rows, |c| c.prototypes.to_string()))?;
    std::fs::write(dir.join("grid.toml"), toml::to_string(spec).map_err(|e| RunError::Io(e.to_string()))?)
        .map_err(|e| RunError::Io(e.to_string()))?;
    std::fs::write(dir.join("config.toml"), base.to_toml()).map_err(|e| RunError::Io(e.to_string()))?;
    let failures = rows.iter().filter(|r| r.outcome.is_err()).count();
    for row in rows.iter().filter(|r| r.outcome.is_err()) {
        eprintln!(
            "cell {} seed {} failed: {}",
            row.cell.variant,
            row.seed,
            row.outcome.as_ref().expect_err("failed row")
        );
    }
    println!("{} runs, {} failed; tables in {}", rows.len(), failures, dir.display());
    Ok((dir, failures))
}

/// Prints the report and returns whether every property held.
pub fn cmd_verify(options: &VerifyOptions) -> bool {
    let reports = run_verify(options);
    for r in &reports {
        println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
    }
    let failed = reports.iter().filter(|r| !r.passed).count();
    println!("{} properties, {} failed", reports.len(), failed);
    failed == 0
}

pub fn main_with(cli: Cli) -> ExitCode {
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args).map(|_| EXIT_OK),
        Command::Ablate {
            config,
            grid,
            lambdas,
            prototypes,
            seeds,
            standard_variants,
        } => load_grid(grid.as_deref(), lambdas, prototypes, seeds, *standard_variants)
            .and_then(|spec| cmd_ablate(config, &spec))
            .map(|(_, failures)| if failures == 0 { EXIT_OK } else { EXIT_EXECUTION_ERROR }),
        Command::Verify { corrupt_lambda } => Ok(if cmd_verify(&VerifyOptions {
            corrupt_lambda: *corrupt_lambda,
        }) {
            EXIT_OK
        } else {
            EXIT_PROPERTY_FAILURE
        }),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_EXECUTION_ERROR)
        }
    }
}
