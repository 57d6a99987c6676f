//! Command-line driver: `run`, `ablate`, `sweep`, `verify`, `landscape`.
//!
//! Exit codes are 0 on success, 1 on runtime failure and 2 on config errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use fedism_core::config::{parse_config, parse_override, to_toml};
use fedism_core::data::Sample;
use fedism_core::experiment::{prepare_seed, run_seed};
use fedism_core::landscape::{landscape_slice, random_directions, SliceGrid};
use fedism_core::metrics::METRIC_NAMES;
use fedism_core::nn::{ClassPriors, MlpObjective};
use fedism_core::rng::derive_seed;
use fedism_core::verify::{run_all, Backprop, GradientSource};
use fedism_core::{run_experiment, Error, ExperimentConfig, ExperimentResult, StrategyRegistry, Summary};

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;

/// Parameters `sweep` accepts.
pub const SWEEPABLE: [&str; 4] = ["method.q", "method.beta", "method.rho", "partition.corrupted_ratio"];

#[derive(Debug, Parser)]
#[command(
    name = "fedism",
    version,
    about = "Federated fairness simulator under imaging quality shift"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the configured method over all seeds.
    Run(ExperimentArgs),
    /// Run FedAvg, +SALT, +SAGA and FedISM on the same seeds.
    Ablate(ExperimentArgs),
    /// Run once per value of a single parameter.
    Sweep(SweepArgs),
    /// Numerical self-checks on randomized instances.
    Verify {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the configured method on the first seed and slice its loss surface.
    Landscape(LandscapeArgs),
}

#[derive(Debug, Args)]
pub struct ExperimentArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Dotted-path override, e.g. `method.q=5.0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Number of seeds, overriding `run.seeds`.
    #[arg(long)]
    pub seeds: Option<usize>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    #[arg(long)]
    pub param: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
}

#[derive(Debug, Args)]
pub struct LandscapeArgs {
    #[command(flatten)]
    pub common: ExperimentArgs,
    /// Half-width of the square grid.
    #[arg(long, default_value_t = 1.0)]
    pub extent: f64,
    /// Points per axis.
    #[arg(long, default_value_t = 21)]
    pub steps: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Runtime(#[from] Error),
    #[error("writing {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{0} check(s) failed")]
    ChecksFailed(usize),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        }
    }
}

/// Config-stage errors from the core library map to exit 2.
fn config_err(e: Error) -> CliError {
    match e {
        Error::Config(m) | Error::InvalidArgument(m) | Error::InvalidArchitecture(m) => CliError::Config(m),
        e @ Error::UnknownStrategy { .. } => CliError::Config(e.to_string()),
        other => CliError::Runtime(other),
    }
}

/// Parses arguments and runs the command. Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("fedism: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(a) => with_pool(a.threads, || cmd_run(&a)),
        Command::Ablate(a) => with_pool(a.threads, || cmd_ablate(&a)),
        Command::Sweep(a) => with_pool(a.common.threads, || cmd_sweep(&a)),
        Command::Verify { out } => cmd_verify(&out, &Backprop),
        Command::Landscape(a) => with_pool(a.common.threads, || cmd_landscape(&a)),
    }
}

fn with_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .expect("thread pool")
            .install(f),
        None => f(),
    }
}

/// Reads the config file and applies, in order: `FEDISM_SEED`, `--set`
/// overrides, `--seeds`.
pub fn load_config(args: &ExperimentArgs, extra: &[String]) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.config.display())))?;
    let mut specs = Vec::new();
    if let Ok(seed) = std::env::var("FEDISM_SEED") {
        let seed: u64 = seed
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("FEDISM_SEED `{seed}` is not an unsigned integer")))?;
        specs.push(format!("run.master_seed={seed}"));
    }
    specs.extend(args.overrides.iter().cloned());
    if let Some(n) = args.seeds {
        specs.push(format!("run.seeds={n}"));
    }
    specs.extend(extra.iter().cloned());
    let overrides = specs
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(config_err)?;
    let config = parse_config(&text, &overrides).map_err(config_err)?;
    StrategyRegistry::with_builtins()
        .resolve(&config.method)
        .map_err(config_err)?;
    Ok(config)
}

/// Writes via a sibling temp file and a rename.
pub fn write_atomic(path: &Path, contents: &str) -> Result<(), CliError> {
    let io = |source| CliError::Io {
        path: path.to_owned(),
        source,
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io)?;
    }
    let name = path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default();
    let tmp = path.with_file_name(format!(".{name}.tmp-{}", std::process::id()));
    fs::write(&tmp, contents).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

fn write_runs(out: &Path, result: &ExperimentResult) -> Result<(), CliError> {
    for run in &result.runs {
        let dir = out.join(&result.method).join(run.seed.to_string());
        write_atomic(&dir.join("metrics.csv"), &run.metrics_csv())?;
        write_atomic(&dir.join("data_hash"), &format!("{}\n", run.data_hash))?;
        log::info!("{} seed {} data {}", result.method, run.seed, run.data_hash);
    }
    Ok(())
}

fn to_json<T: serde::Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("summary serializes");
    s.push('\n');
    s
}

fn cmd_run(args: &ExperimentArgs) -> Result<(), CliError> {
    let config = load_config(args, &[])?;
    write_atomic(&args.out.join("resolved_config"), &to_toml(&config))?;
    let result = run_experiment(&config, &StrategyRegistry::with_builtins())?;
    write_runs(&args.out, &result)?;
    write_atomic(&args.out.join("summary.json"), &to_json(&result.summary))
}

/// Long-format table: one row per (metric, method) with the difference of
/// the mean against the FedAvg row.
pub fn ablation_table(summaries: &[Summary]) -> String {
    let base = summaries.iter().find(|s| s.method == "fedavg").unwrap_or(&summaries[0]);
    let mut out = String::from("metric,method,mean,std,delta_vs_fedavg\n");
    for metric in METRIC_NAMES {
        for s in summaries {
            let m = s.mean_of(metric);
            let _ = writeln!(
                out,
                "{metric},{},{m},{},{}",
                s.method,
                s.std[metric],
                m - base.mean_of(metric)
            );
        }
    }
    out
}

fn cmd_ablate(args: &ExperimentArgs) -> Result<(), CliError> {
    let config = load_config(args, &[])?;
    write_atomic(&args.out.join("resolved_config"), &to_toml(&config))?;
    let registry = StrategyRegistry::with_builtins();
    let mut summaries = Vec::new();
    for method in config.method.ablation_set() {
        let result = run_experiment(&config.with_method(method), &registry)?;
        write_runs(&args.out, &result)?;
        for run in &result.runs {
            eprintln!("{} seed {} data_hash {}", result.method, run.seed, run.data_hash);
        }
        summaries.push(result.summary);
    }
    write_atomic(&args.out.join("ablation.csv"), &ablation_table(&summaries))?;
    write_atomic(&args.out.join("summary.json"), &to_json(&summaries))
}

/// `value,method,<metric>_mean,...,<metric>_std,...`.
pub fn sweep_table(param: &str, rows: &[(f64, Summary)]) -> String {
    let mut out = format!("{param},method");
    for m in METRIC_NAMES {
        let _ = write!(out, ",{m}_mean");
    }
    for m in METRIC_NAMES {
        let _ = write!(out, ",{m}_std");
    }
    out.push('\n');
    for (value, s) in rows {
        let _ = write!(out, "{value},{}", s.method);
        for m in METRIC_NAMES {
            let _ = write!(out, ",{}", s.mean[m]);
        }
        for m in METRIC_NAMES {
            let _ = write!(out, ",{}", s.std[m]);
        }
        out.push('\n');
    }
    out
}

fn cmd_sweep(args: &SweepArgs) -> Result<(), CliError> {
    if !SWEEPABLE.contains(&args.param.as_str()) {
        return Err(CliError::Config(format!(
            "cannot sweep `{}`; expected one of {}",
            args.param,
            SWEEPABLE.join(", ")
        )));
    }
    let registry = StrategyRegistry::with_builtins();
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for &value in &args.values {
        let config = load_config(&args.common, &[format!("{}={value:?}", args.param)])?;
        let point = args.common.out.join(format!("{}={value}", args.param));
        write_atomic(&point.join("resolved_config"), &to_toml(&config))?;
        let result = run_experiment(&config, &registry)?;
        write_runs(&point, &result)?;
        write_atomic(&point.join("summary.json"), &to_json(&result.summary))?;
        summaries.push(result.summary.clone());
        rows.push((value, result.summary));
    }
    write_atomic(&args.common.out.join("sweep.csv"), &sweep_table(&args.param, &rows))?;
    write_atomic(&args.common.out.join("summary.json"), &to_json(&summaries))
}

/// Runs the self-check suite against `source`, writing `verify_report.txt`.
pub fn cmd_verify(out: &Path, source: &dyn GradientSource) -> Result<(), CliError> {
    let report = run_all(source);
    write_atomic(&out.join("verify_report.txt"), &report.to_text())?;
    print!("{}", report.to_text());
    let failed = report.failed();
    if failed.is_empty() {
        Ok(())
    } else {
        eprintln!("failed: {}", failed.join(", "));
        Err(CliError::ChecksFailed(failed.len()))
    }
}

fn cmd_landscape(args: &LandscapeArgs) -> Result<(), CliError> {
    let config = load_config(&args.common, &[])?;
    if args.steps == 0 || !(args.extent.is_finite() && args.extent >= 0.0) {
        return Err(CliError::Config(
            "landscape grid needs steps >= 1 and a finite extent >= 0".into(),
        ));
    }
    write_atomic(&args.common.out.join("resolved_config"), &to_toml(&config))?;
    let rules = StrategyRegistry::with_builtins()
        .resolve(&config.method)
        .map_err(config_err)?;
    let seed = config.run.master_seed;
    let setup = prepare_seed(&config, seed)?;
    let run = run_seed(&config, &rules, &setup)?;
    let params = &run.final_params;
    let (d1, d2) = random_directions(params.len(), derive_seed(seed, "landscape", 0))?;
    let grid = SliceGrid {
        extent: args.extent,
        steps: args.steps,
    };
    let classes = config.task.classes;

    let train: Vec<&Sample> = setup.clients.iter().flat_map(|c| c.data.samples.iter()).collect();
    let train_priors = ClassPriors::from_labels(train.iter().map(|s| s.y), classes);
    let train_obj = MlpObjective {
        arch: &setup.arch,
        samples: train,
        priors: &train_priors,
        tau: config.method.tau,
    };
    let uniform = ClassPriors::uniform(classes);
    let test_obj = MlpObjective {
        arch: &setup.arch,
        samples: setup.clean_test.iter().collect(),
        priors: &uniform,
        tau: 0.0,
    };
    let dir = args.common.out.join(&config.method.name);
    let train_slice = landscape_slice(&train_obj, params, (&d1, &d2), grid)?;
    write_atomic(&dir.join("landscape_train.csv"), &train_slice.to_csv())?;
    let test_slice = landscape_slice(&test_obj, params, (&d1, &d2), grid)?;
    write_atomic(&dir.join("landscape_test.csv"), &test_slice.to_csv())
}
