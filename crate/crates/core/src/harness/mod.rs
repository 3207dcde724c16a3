//! Command-line front end: experiment files in, reproducible artifacts out.
//!
//! Layout of an experiment directory:
//!
//! ```text
//! <out>/<output_dir>/
//!   experiment.toml            resolved configuration (overrides applied)
//!   runs/<alg>_T<T>_s<seed>/   metrics.csv, events.jsonl, record.json
//!   summary.json
//!   manifest.json              every file above with sha256 and fingerprint
//! ```

mod artifacts;
mod config;
mod run;
mod trace_diff;
mod verify;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::error::Error;

pub use artifacts::{sha256_hex, ArtifactStatus, Manifest, ManifestEntry, MANIFEST_FILE};
pub use config::{
    apply_override, CellSpec, ExperimentConfig, FedAvgSection, HyperSection, ScheduleMode,
    SimSection,
};
pub use run::{
    bound_precondition_failure, experiment_fingerprint, run_cell, run_experiment, CellOutcome,
    CellRecord, ExperimentOutcome, ExperimentSummary, HorizonSummary, CONFIG_FILE, SUMMARY_FILE,
};
pub use trace_diff::{trace_diff, TraceDiff};
pub use verify::{
    fit_rate_dir, verify_bound, StoredExperiment, VerifyReport, BOUND_REPORT_FILE, RATE_FIT_FILE,
};

/// Environment variable naming the output root when `--out` is absent.
pub const OUT_ENV: &str = "FEDBUFF_OUT";

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 1;
pub const EXIT_ABORTED: i32 = 2;
/// Bound violated, trace divergence, or rate slope above the requested limit.
pub const EXIT_VIOLATED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "fedbuff", version, about = "Buffered asynchronous federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run every (seed, horizon) cell of an experiment file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Dotted KEY=VALUE assignment applied to the config; repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        #[arg(long, env = OUT_ENV)]
        out: Option<PathBuf>,
    },
    /// Check the multi-seed estimate against the convergence bound.
    VerifyBound { experiment_dir: PathBuf },
    /// Compare two JSONL event logs.
    TraceDiff { left: PathBuf, right: PathBuf },
    /// Fit the log-log slope of the time-averaged squared gradient norm.
    FitRate {
        experiment_dir: PathBuf,
        /// Exit with status 3 when the fitted slope exceeds this value.
        #[arg(long, allow_negative_numbers = true)]
        max_slope: Option<f64>,
    },
}

/// Exit status for an error escaping a subcommand.
pub fn exit_code(err: &Error) -> i32 {
    if err.is_runtime_abort() || matches!(err, Error::Io(_)) {
        EXIT_ABORTED
    } else {
        EXIT_INVALID
    }
}

fn fail(err: Error) -> i32 {
    eprintln!("error: {err}");
    exit_code(&err)
}

/// Parse `args` (including the program name) and execute; returns the exit status.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INVALID } else { EXIT_OK };
        }
    };
    match cli.command {
        Command::Run {
            config,
            overrides,
            jobs,
            out,
        } => {
            let cfg = match ExperimentConfig::load(&config, &overrides) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            let root = out.unwrap_or_else(|| PathBuf::from("."));
            match run_experiment(&cfg, &root, jobs) {
                Ok(outcome) => {
                    println!(
                        "{} cells written to {} ({} aborted)",
                        outcome.cells.len(),
                        outcome.dir.display(),
                        outcome.aborted()
                    );
                    for c in outcome.cells.iter().filter(|c| !c.completed()) {
                        eprintln!(
                            "aborted {}: {}",
                            c.spec.dir_name(),
                            c.error.as_deref().unwrap_or("")
                        );
                    }
                    if outcome.aborted() > 0 {
                        EXIT_ABORTED
                    } else {
                        EXIT_OK
                    }
                }
                Err(e) => fail(e),
            }
        }
        Command::VerifyBound { experiment_dir } => match verify_bound(&experiment_dir) {
            Ok(report) => {
                for r in &report.reports {
                    println!(
                        "T={} lhs={:.6e} stderr={:.3e} bound={:.6e} satisfied={}",
                        r.bound_inputs.t, r.empirical_lhs, r.standard_error, r.bound_value, r.satisfied
                    );
                }
                if report.satisfied {
                    EXIT_OK
                } else {
                    EXIT_VIOLATED
                }
            }
            Err(e) => fail(e),
        },
        Command::TraceDiff { left, right } => match trace_diff(&left, &right) {
            Ok(TraceDiff::Equal { lines }) => {
                println!("equal ({lines} lines)");
                EXIT_OK
            }
            Ok(TraceDiff::Diverged { line, left, right }) => {
                println!("first divergence at line {line}");
                println!("< {}", left.as_deref().unwrap_or("<end of file>"));
                println!("> {}", right.as_deref().unwrap_or("<end of file>"));
                EXIT_VIOLATED
            }
            Err(e) => fail(e),
        },
        Command::FitRate {
            experiment_dir,
            max_slope,
        } => match fit_rate_dir(&experiment_dir) {
            Ok(fit) => {
                println!("slope={:.4} residual={:.3e}", fit.slope, fit.residual);
                match max_slope {
                    Some(limit) if fit.slope > limit => EXIT_VIOLATED,
                    _ => EXIT_OK,
                }
            }
            Err(e) => fail(e),
        },
    }
}
