//! `relattn check|bench|train|eval --config <path> --out <dir> [--seed N]`.
//!
//! Each subcommand reads a flat JSON config (see [`config`]), echoes the
//! resolved config to `<out>/config.json` and writes its results next to it:
//!
//! | subcommand | files |
//! |---|---|
//! | `check` | `report.json` |
//! | `bench` | `bench.json` |
//! | `train` | `metrics.jsonl`, `metrics.json`, `checkpoint.json`, `run.json` |
//! | `eval`  | `metrics.jsonl`, `eval.json`, `run.json` |
//!
//! Exit codes: 0 success, 1 check failure, 2 config error, 3 runtime abort.

mod bench;
mod check;
pub mod config;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Parser;
use serde::Serialize;
use thiserror::Error;

pub use bench::{run_bench, BenchPoint, BenchReport, OVERHEAD_BOUND};
pub use check::{run_check, CaseResult, CheckReport, SuiteSummary};
pub use config::{
    echo_config, parse_config, parse_config_str, BenchConfig, CheckConfig, ConfigError, EvalConfig, FlatConfig,
    RunConfig,
};

use crate::model::{load_checkpoint, save_checkpoint};
use crate::training::{chance_accuracy, eval_lengths, train_run, MetricEvent};

/// Everything a single invocation needs.
#[derive(Clone, Debug, PartialEq, Eq, Parser)]
#[command(name = "relattn", version, about = "Relation-aware self-attention: oracle checks, benchmarks and toy training")]
pub struct CliConfig {
    /// check: oracle suites; bench: kernel timings; train: toy-task
    /// training; eval: checkpoint evaluation.
    #[arg(value_enum)]
    pub subcommand: SubcommandKind,
    /// Flat JSON config file.
    #[arg(long)]
    pub config: PathBuf,
    /// Output directory, created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the config's seed without changing the echoed config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Progress on stderr; repeat for more.
    #[arg(short, long, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SubcommandKind {
    Check,
    Bench,
    Train,
    Eval,
}

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error("{failed} of {total} check cases failed; first: {first}")]
    CheckFailed { failed: usize, total: usize, first: String },

    #[error("checkpoint not found: {0}")]
    MissingCheckpoint(PathBuf),

    #[error(transparent)]
    Runtime(#[from] crate::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::CheckFailed { .. } => 1,
            CliError::Config(_) => 2,
            CliError::MissingCheckpoint(_) | CliError::Runtime(_) => 3,
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("reports serialize");
    fs::write(path, text + "\n").map_err(|e| crate::Error::io(path, e).into())
}

fn prepare_out(out: &Path) -> Result<(), ConfigError> {
    fs::create_dir_all(out).map_err(|source| ConfigError::OutDir {
        path: out.display().to_string(),
        source,
    })
}

/// Line-delimited JSON writer for metric events.
struct EventLog {
    path: PathBuf,
    file: BufWriter<File>,
    error: Option<std::io::Error>,
}

impl EventLog {
    fn create(path: PathBuf) -> Result<Self, CliError> {
        let file = File::create(&path).map_err(|e| crate::Error::io(&path, e))?;
        Ok(Self {
            path,
            file: BufWriter::new(file),
            error: None,
        })
    }

    fn record(&mut self, event: &MetricEvent) {
        if self.error.is_none() {
            let line = serde_json::to_string(event).expect("events serialize");
            if let Err(e) = writeln!(self.file, "{line}") {
                self.error = Some(e);
            }
        }
    }

    fn finish(mut self) -> Result<(), CliError> {
        let flushed = match self.error.take() {
            Some(e) => Err(e),
            None => self.file.flush(),
        };
        flushed.map_err(|e| crate::Error::io(&self.path, e).into())
    }
}

/// Provenance written next to the metrics; holds everything that may
/// differ between otherwise identical runs.
#[derive(Serialize)]
struct RunInfo {
    subcommand: SubcommandKind,
    config_seed: u64,
    seed_override: Option<u64>,
    effective_seed: u64,
    steps_per_sec: Option<f64>,
    elapsed_secs: f64,
}

/// Runs one invocation. Messages go to stderr only when `verbose > 0`;
/// a one-line summary is returned for the caller to print.
pub fn run(cli: &CliConfig) -> Result<String, CliError> {
    match cli.subcommand {
        SubcommandKind::Check => {
            let cfg: CheckConfig = parse_config(&cli.config)?;
            prepare_out(&cli.out)?;
            echo_config(&cfg, &cli.out)?;
            let effective = CheckConfig {
                seed: cli.seed.unwrap_or(cfg.seed),
                ..cfg
            };
            let verbose = cli.verbose;
            let report = run_check(&effective, &mut |c| {
                if verbose > 1 || (verbose > 0 && !c.passed) {
                    eprintln!("{} #{} {} {}", c.suite, c.id, if c.passed { "ok" } else { "FAIL" }, c.config);
                }
            });
            write_json(&cli.out.join("report.json"), &report)?;
            let summary = report
                .suites
                .iter()
                .map(|(name, s)| format!("{name} {}/{}", s.cases - s.failed, s.cases))
                .collect::<Vec<_>>()
                .join(", ");
            if report.passed {
                Ok(format!("check passed: {summary}"))
            } else {
                let first = report
                    .failures()
                    .next()
                    .map(|c| format!("{} #{} {} errors {:?}", c.suite, c.id, c.config, c.max_errors))
                    .unwrap_or_default();
                Err(CliError::CheckFailed {
                    failed: report.failed_cases,
                    total: report.total_cases,
                    first,
                })
            }
        }
        SubcommandKind::Bench => {
            let cfg: BenchConfig = parse_config(&cli.config)?;
            prepare_out(&cli.out)?;
            echo_config(&cfg, &cli.out)?;
            let effective = BenchConfig {
                seed: cli.seed.unwrap_or(cfg.seed),
                ..cfg
            };
            let verbose = cli.verbose;
            let report = run_bench(&effective, &mut |p| {
                if verbose > 0 {
                    eprintln!(
                        "n={} b={} h={} k={} overhead {:.3} reference {:?}",
                        p.n, p.b, p.h, p.k, p.overhead_ratio, p.reference_ratio
                    );
                }
            })?;
            write_json(&cli.out.join("bench.json"), &report)?;
            Ok(format!(
                "bench: {} points, max overhead {:.3} (bound {}), reference ratio increasing: {:?}",
                report.points.len(),
                report.max_overhead_ratio,
                report.overhead_bound,
                report.reference_ratio_increasing
            ))
        }
        SubcommandKind::Train => {
            let flat: RunConfig = parse_config(&cli.config)?;
            let mut cfg = flat.to_train_config()?;
            prepare_out(&cli.out)?;
            echo_config(&flat, &cli.out)?;
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let mut log = EventLog::create(cli.out.join("metrics.jsonl"))?;
            let verbose = cli.verbose;
            let start = std::time::Instant::now();
            let outcome = train_run(&cfg, &mut |e| {
                log.record(e);
                if verbose > 0 {
                    match e {
                        MetricEvent::Step { step, loss, .. } if step % 100 == 0 || verbose > 1 => {
                            eprintln!("step {step} loss {loss:.4}")
                        }
                        MetricEvent::Eval { length, accuracy } => eprintln!("length {length} accuracy {accuracy:.4}"),
                        _ => {}
                    }
                }
            });
            log.finish()?;
            let outcome = outcome?;
            write_json(&cli.out.join("metrics.json"), &outcome.metrics)?;
            save_checkpoint(&cli.out.join("checkpoint.json"), &outcome.checkpoint)?;
            write_json(
                &cli.out.join("run.json"),
                &RunInfo {
                    subcommand: cli.subcommand,
                    config_seed: flat.seed,
                    seed_override: cli.seed,
                    effective_seed: cfg.seed,
                    steps_per_sec: Some(outcome.steps_per_sec),
                    elapsed_secs: start.elapsed().as_secs_f64(),
                },
            )?;
            let m = &outcome.metrics;
            Ok(format!(
                "train: final loss {:.4}, train accuracy {:.4}, eval accuracy {}, chance {:.4}",
                m.final_loss,
                m.train_accuracy,
                m.eval_accuracy.map_or("n/a".into(), |a| format!("{a:.4}")),
                m.chance_accuracy
            ))
        }
        SubcommandKind::Eval => {
            let flat: EvalConfig = parse_config(&cli.config)?;
            prepare_out(&cli.out)?;
            echo_config(&flat, &cli.out)?;
            let path = flat.checkpoint.clone().unwrap_or_else(|| cli.out.join("checkpoint.json"));
            if !path.is_file() {
                return Err(CliError::MissingCheckpoint(path));
            }
            let start = std::time::Instant::now();
            let ckpt = load_checkpoint(&path)?;
            let mut cfg = flat.train_config(ckpt.config.clone());
            cfg.seed = cli.seed.unwrap_or(cfg.seed);
            let lengths = flat.lengths();
            let per_length = eval_lengths(&ckpt.params, &cfg, &lengths, cfg.seed)?;
            let mut log = EventLog::create(cli.out.join("metrics.jsonl"))?;
            for (&length, &accuracy) in &per_length {
                log.record(&MetricEvent::Eval { length, accuracy });
            }
            log.finish()?;
            let mean = per_length.values().sum::<f64>() / per_length.len() as f64;
            let chance = per_length
                .keys()
                .map(|&n| (n, chance_accuracy(cfg.task, n, n, cfg.encoder.vocab_size)))
                .collect::<std::collections::BTreeMap<_, _>>();
            write_json(
                &cli.out.join("eval.json"),
                &serde_json::json!({
                    "checkpoint": path.display().to_string(),
                    "per_length_accuracy": per_length,
                    "mean_accuracy": mean,
                    "chance_accuracy": chance,
                }),
            )?;
            write_json(
                &cli.out.join("run.json"),
                &RunInfo {
                    subcommand: cli.subcommand,
                    config_seed: flat.seed,
                    seed_override: cli.seed,
                    effective_seed: cfg.seed,
                    steps_per_sec: None,
                    elapsed_secs: start.elapsed().as_secs_f64(),
                },
            )?;
            Ok(format!("eval: mean accuracy {mean:.4} over {} lengths", per_length.len()))
        }
    }
}

#[cfg(test)]
mod tests;
