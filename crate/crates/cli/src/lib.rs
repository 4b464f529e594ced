//! Command line runner for the rwre-core experiments.

pub mod commands;
pub mod config;
pub mod output;

use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use rwre_core::coarsegrain::SchemeKind;
use rwre_core::Error as CoreError;
use serde_json::json;

use commands::{Subcommand, FIXTURE_SET};
use config::ExperimentConfig;
use output::{write_json, Manifest, Sink};

pub const EXIT_OK: i32 = 0;
pub const EXIT_IO: i32 = 1;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_FAILED: i32 = 3;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SchemeArg {
    Paper,
    Scaled,
}

#[derive(Parser, Debug)]
#[command(name = "rwre-lab", version, about = "Exit-measure experiments for random walks in balanced random environments")]
pub struct Cli {
    /// TOML experiment config; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads; all logical cores when absent.
    #[arg(long)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Overrides `master_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the ball scheme.
    #[arg(long, value_enum)]
    pub scheme: Option<SchemeArg>,
    #[command(subcommand)]
    pub action: Action,
}

#[derive(clap::Subcommand, Debug)]
pub enum Action {
    /// Runs one experiment.
    Run {
        #[arg(value_enum)]
        subcommand: Subcommand,
    },
}

fn error_json(kind: &str, message: &str, residual: Option<f64>) -> serde_json::Value {
    json!({ "error": kind, "message": message, "residual": residual })
}

/// Maps a failure to its exit code and error record.
fn classify_error(e: &anyhow::Error) -> (i32, serde_json::Value) {
    let msg = format!("{e:#}");
    if let Some(ce) = e.downcast_ref::<CoreError>() {
        return match ce {
            CoreError::Domain(_) | CoreError::DimensionMismatch(..) => (EXIT_INVALID, error_json("domain", &msg, None)),
            CoreError::Budget { .. } => (EXIT_INVALID, error_json("budget", &msg, None)),
            CoreError::Parse(_) => (EXIT_INVALID, error_json("parse", &msg, None)),
            CoreError::NonConvergence { residual, .. } => {
                (EXIT_FAILED, error_json("non_convergence", &msg, Some(*residual)))
            }
            CoreError::Divergence { increment, .. } => (EXIT_FAILED, error_json("divergence", &msg, Some(*increment))),
            CoreError::Io(_) => (EXIT_IO, error_json("io", &msg, None)),
        };
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return (EXIT_IO, error_json("io", &msg, None));
    }
    (EXIT_IO, error_json("internal", &msg, None))
}

fn report_error(out: &Path, code: i32, value: &serde_json::Value) -> i32 {
    eprintln!("{}", serde_json::to_string(value).expect("json"));
    let _ = std::fs::create_dir_all(out);
    let _ = write_json(&out.join("error.json"), value);
    code
}

/// Runs one subcommand into `dir` and writes its manifest.
fn run_one(cmd: Subcommand, cfg: &ExperimentConfig, dir: &Path, jobs: usize) -> Result<i32, (i32, serde_json::Value)> {
    let t0 = Instant::now();
    let name = cmd.name();
    let mut sink = Sink::new(dir, &name, cfg).map_err(|e| (EXIT_IO, error_json("io", &e.to_string(), None)))?;
    commands::run(cmd, cfg, &mut sink).map_err(|e| classify_error(&e))?;
    let status = if sink.all_pass() { EXIT_OK } else { EXIT_FAILED };
    let manifest = Manifest {
        tool: "rwre-lab",
        version: env!("CARGO_PKG_VERSION"),
        subcommand: &name,
        config_sha256: cfg.hash(),
        config: cfg,
        master_seed: cfg.master_seed,
        jobs,
        files: &sink.files,
        checks: &sink.checks,
        status,
        wall_time_s: t0.elapsed().as_secs_f64(),
    };
    write_json(&dir.join("manifest.json"), &manifest).map_err(|e| (EXIT_IO, error_json("io", &e.to_string(), None)))?;
    for c in sink.checks.iter().filter(|c| !c.pass) {
        eprintln!("check failed: {} value {:e} limit {:e}", c.name, c.value, c.limit);
    }
    Ok(status)
}

/// Byte comparison of every CSV under `got` against `expected`; returns mismatching paths.
pub fn compare_fixtures(got: &Path, expected: &Path) -> std::io::Result<Vec<String>> {
    let mut bad = Vec::new();
    for cmd in FIXTURE_SET {
        let sub = cmd.name();
        let exp_dir = expected.join(&sub);
        if !exp_dir.is_dir() {
            bad.push(format!("{sub}: missing expected directory"));
            continue;
        }
        let mut names: Vec<_> = std::fs::read_dir(&exp_dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv"))
            .collect();
        names.sort();
        for n in names {
            let a = std::fs::read(exp_dir.join(&n))?;
            match std::fs::read(got.join(&sub).join(&n)) {
                Ok(b) if a == b => {}
                _ => bad.push(format!("{sub}/{n}")),
            }
        }
    }
    Ok(bad)
}

fn run_all_fixtures(cfg: &ExperimentConfig, out: &Path, jobs: usize) -> Result<i32, (i32, serde_json::Value)> {
    let mut status = EXIT_OK;
    for cmd in FIXTURE_SET {
        let s = run_one(*cmd, cfg, &out.join(cmd.name()), jobs)?;
        status = status.max(s);
    }
    if let Some(dir) = std::env::var_os("RWRE_LAB_FIXTURES") {
        let bad = compare_fixtures(out, Path::new(&dir)).map_err(|e| (EXIT_IO, error_json("io", &e.to_string(), None)))?;
        for b in &bad {
            eprintln!("fixture mismatch: {b}");
        }
        if !bad.is_empty() {
            status = EXIT_FAILED;
        }
    }
    Ok(status)
}

/// Runs the parsed command line and returns the process exit code.
pub fn execute(cli: Cli) -> i32 {
    let mut cfg = match &cli.config {
        Some(p) => match ExperimentConfig::load(p) {
            Ok(c) => c,
            Err(m) => return report_error(&cli.out, EXIT_INVALID, &error_json("config", &m, None)),
        },
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.master_seed = s;
    }
    if let Some(s) = cli.scheme {
        cfg.scheme = match s {
            SchemeArg::Paper => SchemeKind::Paper,
            SchemeArg::Scaled => SchemeKind::Scaled,
        };
    }
    if let Err(m) = cfg.validate() {
        return report_error(&cli.out, EXIT_INVALID, &error_json("config", &m, None));
    }
    let jobs = cli.jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if jobs == 0 {
        return report_error(&cli.out, EXIT_INVALID, &error_json("config", "jobs must be positive", None));
    }
    let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global();
    let Action::Run { subcommand } = cli.action;
    let res = match subcommand {
        Subcommand::AllFixtures => run_all_fixtures(&cfg, &cli.out, jobs),
        cmd => run_one(cmd, &cfg, &cli.out, jobs),
    };
    match res {
        Ok(code) => code,
        Err((code, v)) => report_error(&cli.out, code, &v),
    }
}
