//! Run records and the per-step metrics CSV.

use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Problem;
use crate::param::ParamVector;
use crate::protocol::Contributor;
use crate::sim::StalenessAudit;

pub const CSV_HEADER: &str = "t,grad_norm_sq,f_value,max_staleness_so_far,uploads_so_far,wall_events";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Algorithm {
    FedBuff,
    PureAsync,
    FedAvgSync,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::FedBuff => "fed_buff",
            Algorithm::PureAsync => "pure_async",
            Algorithm::FedAvgSync => "fed_avg_sync",
        }
    }
}

/// Metrics of the server model wᵗ, recorded when wᵗ comes into existence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub t: u64,
    pub grad_norm_sq: f64,
    pub f_value: f64,
    pub max_staleness_so_far: u64,
    pub uploads_so_far: u64,
    pub wall_events: u64,
}

impl MetricRow {
    /// Evaluate ‖∇f(w)‖² and f(w) for the row of step `t`.
    pub fn observe(
        problem: &Problem,
        t: u64,
        model: &ParamVector,
        max_staleness_so_far: u64,
        uploads_so_far: u64,
        wall_events: u64,
    ) -> Result<Self> {
        let grad = problem.global_gradient(model)?;
        Ok(MetricRow {
            t,
            grad_norm_sq: grad.norm_sq(),
            f_value: problem.global_objective(model)?,
            max_staleness_so_far,
            uploads_so_far,
            wall_events,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlushRecord {
    /// The step t whose buffer was applied, producing w^{t+1}.
    pub step: u64,
    pub contributors: Vec<Contributor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub algorithm: Algorithm,
    /// Content hash of the resolved configuration; filled in by the harness.
    pub fingerprint: String,
    pub horizon: u64,
    pub rows: Vec<MetricRow>,
    pub audit: StalenessAudit,
    pub flushes: Vec<FlushRecord>,
    pub final_model: ParamVector,
    /// Server models w⁰..w^T, only kept when requested.
    pub trajectory: Vec<ParamVector>,
    pub events_processed: u64,
    pub sim_time: f64,
    pub uploads: u64,
    pub completed: bool,
}

impl RunRecord {
    pub fn new(algorithm: Algorithm, horizon: u64, initial_model: ParamVector) -> Self {
        RunRecord {
            algorithm,
            fingerprint: String::new(),
            horizon,
            rows: Vec::with_capacity(horizon as usize),
            audit: StalenessAudit::default(),
            flushes: Vec::new(),
            final_model: initial_model,
            trajectory: Vec::new(),
            events_processed: 0,
            sim_time: 0.0,
            uploads: 0,
            completed: false,
        }
    }

    pub fn final_checksum(&self) -> String {
        self.final_model.checksum()
    }

    pub fn grad_norm_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.grad_norm_sq).collect()
    }

    /// (1/T)·Σ_t ‖∇f(wᵗ)‖² for this run.
    pub fn time_average_grad_norm_sq(&self) -> f64 {
        let s: f64 = self.rows.iter().map(|r| r.grad_norm_sq).sum();
        s / self.rows.len().max(1) as f64
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        write_metrics_csv(&self.rows, out)
    }

    pub fn summary(&self) -> RunSummary {
        let audit = self.audit.summary();
        RunSummary {
            algorithm: self.algorithm,
            fingerprint: self.fingerprint.clone(),
            horizon: self.horizon,
            rows: self.rows.len() as u64,
            completed: self.completed,
            uploads: self.uploads,
            flushes: self.flushes.len() as u64,
            max_staleness: audit.max_staleness,
            mean_staleness: audit.mean_staleness,
            staleness_violations: audit.violations,
            final_model_checksum: self.final_checksum(),
            final_model: self.final_model.clone(),
            events_processed: self.events_processed,
            sim_time: self.sim_time,
            time_average_grad_norm_sq: self.time_average_grad_norm_sq(),
        }
    }
}

/// The JSON sidecar persisted next to each run's CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub algorithm: Algorithm,
    pub fingerprint: String,
    pub horizon: u64,
    pub rows: u64,
    pub completed: bool,
    pub uploads: u64,
    pub flushes: u64,
    pub max_staleness: u64,
    pub mean_staleness: f64,
    pub staleness_violations: u64,
    pub final_model_checksum: String,
    pub final_model: ParamVector,
    pub events_processed: u64,
    pub sim_time: f64,
    pub time_average_grad_norm_sq: f64,
}

pub fn write_metrics_csv<W: Write>(rows: &[MetricRow], mut out: W) -> Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{}",
            r.t, r.grad_norm_sq, r.f_value, r.max_staleness_so_far, r.uploads_so_far, r.wall_events
        )?;
    }
    Ok(())
}

pub fn read_metrics_csv<R: BufRead>(input: R, source: &str) -> Result<Vec<MetricRow>> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: source.to_string(),
        line,
        message,
    };
    let mut rows = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        if idx == 0 {
            if line != CSV_HEADER {
                return Err(parse_err(lineno, format!("unexpected header {line:?}")));
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(parse_err(lineno, format!("expected 6 fields, got {}", fields.len())));
        }
        let int = |i: usize| {
            fields[i]
                .parse::<u64>()
                .map_err(|e| parse_err(lineno, format!("field {i}: {e}")))
        };
        let float = |i: usize| {
            fields[i]
                .parse::<f64>()
                .map_err(|e| parse_err(lineno, format!("field {i}: {e}")))
        };
        rows.push(MetricRow {
            t: int(0)?,
            grad_norm_sq: float(1)?,
            f_value: float(2)?,
            max_staleness_so_far: int(3)?,
            uploads_so_far: int(4)?,
            wall_events: int(5)?,
        });
    }
    Ok(rows)
}

pub fn read_metrics_csv_file(path: &Path) -> Result<Vec<MetricRow>> {
    let file = std::fs::File::open(path)?;
    read_metrics_csv(std::io::BufReader::new(file), &path.display().to_string())
}
