//! The `hyperaug` command line: `train`, `verify`, `sweep` and
//! `export-policy`.
//!
//! Exit codes: 0 on success, 2 for configuration or usage errors (including
//! a missing config or metrics file), 1 for failures during a run.

pub mod config;
pub mod metrics;
pub mod verify;

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::models::save_checkpoint;
use crate::trainloop::{run, RunMetrics};

use config::{load_config, parse_assignment, read_table, resolve, RunConfig, SEED_ENV};
use metrics::{
    evolution_rows, read_metrics, write_csv, write_json, MetricsWriter, PolicyFile, SweepRow, CHECKPOINT_FILE, CONFIG_FILE,
    EVOLUTION_FILE, METRICS_FILE, POLICY_FILE, SWEEP_FILE,
};

#[derive(Debug, Parser)]
#[command(name = "hyperaug", version, about = "Train a classifier jointly with its augmentation policy")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model and write metrics, policy and checkpoint.
    Train(TrainArgs),
    /// Run the built-in numerical self-checks.
    Verify(ConfigArgs),
    /// Train once per value of one config key and seed.
    Sweep(SweepArgs),
    /// Convert a run's metrics into a per-operation policy table.
    ExportPolicy(ExportArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML config file; defaults apply when omitted.
    #[arg(short, long)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set train.epochs=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Dotted config key to vary, e.g. `train.inner_steps`.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values; duplicates are dropped.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<String>,
    /// Comma-separated seeds; defaults to the configured seed.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory; overrides `output_dir`.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Directory of a finished or interrupted run.
    pub run_dir: PathBuf,
    /// Destination CSV; defaults to `policy_evolution.csv` in the run directory.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// An error tagged with the exit code it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(Error),
    Runtime(Error),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 1,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(e) => write!(f, "configuration error: {e}"),
            Failure::Runtime(e) => write!(f, "error: {e}"),
        }
    }
}

fn usage(e: Error) -> Failure {
    Failure::Usage(e)
}

fn runtime(e: Error) -> Failure {
    Failure::Runtime(e)
}

fn overrides(args: &ConfigArgs) -> Result<Vec<(String, String)>> {
    args.set.iter().map(|s| parse_assignment(s)).collect()
}

fn seed_env() -> Option<String> {
    std::env::var(SEED_ENV).ok()
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Trains with `cfg`, writing every artefact into `out`.
pub fn train_into(cfg: &RunConfig, out: &Path) -> std::result::Result<RunMetrics, Failure> {
    create_dir(out).map_err(runtime)?;
    let data = cfg.data.load().map_err(runtime)?;
    let spec = cfg.model.spec(data.train.shape, data.train.num_classes);
    spec.validate().map_err(usage)?;
    let config_path = out.join(CONFIG_FILE);
    std::fs::write(&config_path, cfg.to_toml().map_err(runtime)?).map_err(|e| runtime(Error::io(&config_path, e)))?;
    let mut writer = MetricsWriter::create(&out.join(METRICS_FILE)).map_err(runtime)?;
    let total = cfg.train.epochs;
    let metrics = run(&cfg.train_config(), &spec, &data, |rec| {
        eprintln!(
            "epoch {:>3}/{total}  train_loss {:.4}  val_loss {:.4}  test_error {:.4}",
            rec.epoch, rec.train_loss, rec.val_loss, rec.test_error
        );
        writer.write(rec)
    })
    .map_err(|e| match e.root() {
        Error::Config { .. } => usage(e),
        _ => runtime(e),
    })?;
    let epochs = metrics.records.last().map_or(0, |r| r.epoch);
    let policy = PolicyFile {
        effective: metrics.policy.snapshot(epochs),
        params: metrics.policy.clone(),
    };
    write_json(&out.join(POLICY_FILE), &policy).map_err(runtime)?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &spec, &metrics.params).map_err(runtime)?;
    Ok(metrics)
}

fn cmd_train(args: &TrainArgs) -> std::result::Result<(), Failure> {
    let cfg = load_config(args.config.config.as_deref(), &overrides(&args.config).map_err(usage)?, seed_env().as_deref())
        .map_err(usage)?;
    let out = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());
    let metrics = train_into(&cfg, &out)?;
    println!("final test error {:.4}; artefacts in {}", metrics.final_test_error(), out.display());
    Ok(())
}

fn cmd_verify(args: &ConfigArgs) -> std::result::Result<(), Failure> {
    if args.config.is_some() || !args.set.is_empty() {
        load_config(args.config.as_deref(), &overrides(args).map_err(usage)?, seed_env().as_deref()).map_err(usage)?;
    }
    let checks = verify::run_checks();
    for c in &checks {
        println!("{c}");
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    println!("{} of {} checks passed", checks.len() - failed, checks.len());
    if failed > 0 {
        return Err(runtime(Error::InvalidInput(format!("{failed} checks failed"))));
    }
    Ok(())
}

/// Order-preserving removal of repeated values.
pub fn dedup_values(values: &[String]) -> Vec<String> {
    let mut seen = Vec::new();
    for v in values.iter().map(|v| v.trim().to_string()) {
        if !v.is_empty() && !seen.contains(&v) {
            seen.push(v);
        }
    }
    seen
}

/// Trains once per (value, seed) and returns the rows of `sweep.csv`.
pub fn sweep_into(
    base: &toml::Table,
    user_overrides: &[(String, String)],
    param: &str,
    values: &[String],
    seeds: &[u64],
    env_seed: Option<&str>,
    out: &Path,
) -> std::result::Result<Vec<SweepRow>, Failure> {
    let values = dedup_values(values);
    if values.is_empty() {
        return Err(usage(Error::config(param, "no values to sweep")));
    }
    // Resolve every configuration up front so a bad value fails before any training.
    let mut plans = Vec::new();
    for value in &values {
        let mut ov = user_overrides.to_vec();
        ov.push((param.to_string(), value.clone()));
        let cfg = resolve(base.clone(), &ov, env_seed).map_err(usage)?;
        let run_seeds = if seeds.is_empty() { vec![cfg.seed] } else { seeds.to_vec() };
        for seed in run_seeds {
            plans.push((value.clone(), seed, RunConfig { seed, ..cfg.clone() }));
        }
    }
    create_dir(out).map_err(runtime)?;
    let mut rows = Vec::with_capacity(plans.len());
    for (value, seed, cfg) in plans {
        let dir = out.join(format!("{param}={value}")).join(format!("seed{seed}"));
        eprintln!("sweep {param}={value} seed {seed}");
        let row = match train_into(&cfg, &dir) {
            Ok(m) => SweepRow {
                param_value: value,
                seed,
                final_test_error: Some(m.final_test_error()),
                peak_memory_proxy: m.records.iter().map(|r| r.peak_tape_nodes).max(),
            },
            Err(f) => {
                eprintln!("sweep {param}={value} seed {seed} failed: {f}");
                SweepRow {
                    param_value: value,
                    seed,
                    final_test_error: None,
                    peak_memory_proxy: None,
                }
            }
        };
        rows.push(row);
        write_csv(&out.join(SWEEP_FILE), &rows).map_err(runtime)?;
    }
    Ok(rows)
}

fn cmd_sweep(args: &SweepArgs) -> std::result::Result<(), Failure> {
    let base = read_table(args.config.config.as_deref()).map_err(usage)?;
    let ov = overrides(&args.config).map_err(usage)?;
    let env = seed_env();
    let out = match &args.out {
        Some(o) => o.clone(),
        None => resolve(base.clone(), &ov, env.as_deref()).map_err(usage)?.output_dir,
    };
    let rows = sweep_into(&base, &ov, &args.param, &args.values, &args.seeds, env.as_deref(), &out)?;
    let failed = rows.iter().filter(|r| r.final_test_error.is_none()).count();
    println!("{} runs, {failed} failed; table in {}", rows.len(), out.join(SWEEP_FILE).display());
    if failed > 0 {
        return Err(runtime(Error::InvalidInput(format!("{failed} sweep runs failed"))));
    }
    Ok(())
}

/// Writes the policy-evolution table of `run_dir`, returning its path.
pub fn export_policy(run_dir: &Path, out: Option<&Path>) -> std::result::Result<PathBuf, Failure> {
    let metrics_path = run_dir.join(METRICS_FILE);
    if !metrics_path.is_file() {
        return Err(usage(Error::config("run_dir", format!("no {} in {}", METRICS_FILE, run_dir.display()))));
    }
    let records = read_metrics(&metrics_path).map_err(runtime)?;
    let dest = out.map_or_else(|| run_dir.join(EVOLUTION_FILE), Path::to_path_buf);
    write_csv(&dest, &evolution_rows(&records)).map_err(runtime)?;
    Ok(dest)
}

fn cmd_export(args: &ExportArgs) -> std::result::Result<(), Failure> {
    let dest = export_policy(&args.run_dir, args.out.as_deref())?;
    println!("wrote {}", dest.display());
    Ok(())
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Verify(a) => cmd_verify(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::ExportPolicy(a) => cmd_export(a),
    };
    match result {
        Ok(()) => 0,
        Err(f) => {
            eprintln!("{f}");
            f.exit_code()
        }
    }
}
