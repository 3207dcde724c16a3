//! Executing the cells of an experiment and persisting their artifacts.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::artifacts::{json_bytes, sha256_hex, write_artifact, ArtifactStatus, Manifest, ManifestEntry};
use super::config::{CellSpec, ExperimentConfig, ScheduleMode};
use crate::analysis::{
    aggregate_curves, compare_with_bound, fit_rate, horizon_threshold, BoundInputs, RateFit,
};
use crate::baselines::{run_fedavg_sync, run_pure_async};
use crate::error::{Error, Result};
use crate::objectives::{generate_problem, Problem, ProblemConstants};
use crate::param::ParamVector;
use crate::record::{Algorithm, RunRecord, RunSummary};
use crate::sim::{run_simulation, ArrivalMode, JsonlSink, NullSink};

pub const CONFIG_FILE: &str = "experiment.toml";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellRecord {
    pub fingerprint: String,
    pub status: ArtifactStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub cell: CellSpec,
    pub summary: RunSummary,
}

/// In-memory result of one cell.
#[derive(Debug, Clone)]
pub struct CellOutcome {
    pub spec: CellSpec,
    pub record: RunRecord,
    pub error: Option<String>,
    pub entries: Vec<ManifestEntry>,
}

impl CellOutcome {
    pub fn completed(&self) -> bool {
        self.error.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonSummary {
    pub horizon: u64,
    pub seeds_completed: usize,
    pub bound_inputs: BoundInputs,
    pub bound_value: f64,
    pub empirical_lhs: Option<f64>,
    pub standard_error: Option<f64>,
    /// Only reported when the bound's preconditions hold for this horizon.
    pub satisfied: Option<bool>,
}

/// Contents of `summary.json`. The flat bound fields describe the largest
/// horizon; `horizons` has one entry per horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSummary {
    pub algorithm: Algorithm,
    pub experiment_fingerprint: String,
    pub bound_inputs: BoundInputs,
    pub bound_value: f64,
    pub empirical_lhs: Option<f64>,
    pub standard_error: Option<f64>,
    pub satisfied: Option<bool>,
    pub rate_fit: Option<RateFit>,
    pub horizons: Vec<HorizonSummary>,
}

#[derive(Debug)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub cells: Vec<CellOutcome>,
    pub summary: ExperimentSummary,
    pub manifest: Manifest,
}

impl ExperimentOutcome {
    pub fn aborted(&self) -> usize {
        self.cells.iter().filter(|c| !c.completed()).count()
    }
}

/// Digest of all cell fingerprints, in resolution order.
pub fn experiment_fingerprint(cells: &[CellSpec]) -> String {
    let joined: Vec<String> = cells.iter().map(CellSpec::fingerprint).collect();
    sha256_hex(joined.join("\n").as_bytes())
}

/// Why the convergence bound does not apply to `horizon`, if it does not.
pub fn bound_precondition_failure(
    cfg: &ExperimentConfig,
    constants: &ProblemConstants,
    horizon: u64,
    seeds: usize,
) -> Option<String> {
    if cfg.algorithm != Algorithm::FedBuff {
        return Some(format!(
            "algorithm is {:?}; the bound covers FedBuff only",
            cfg.algorithm.name()
        ));
    }
    if cfg.sim.mode != ArrivalMode::UniformArrival {
        return Some("sim.mode must be uniform_arrival (uniform client arrivals are assumed)".into());
    }
    if cfg.hyper.schedule != ScheduleMode::Auto {
        return Some("hyper.schedule must be auto (the bound assumes its stepsizes)".into());
    }
    if seeds < 2 {
        return Some(format!("at least 2 completed seeds are needed (have {seeds})"));
    }
    match horizon_threshold(constants.l, cfg.hyper.q, cfg.sim.tau_max) {
        Ok(min) if horizon < min => Some(format!(
            "T = {horizon} is below the horizon threshold {min} for L = {}, Q = {}, tau = {}",
            constants.l, cfg.hyper.q, cfg.sim.tau_max
        )),
        Ok(_) => None,
        Err(e) => Some(e.to_string()),
    }
}

fn execute(cell: &CellSpec, problem: &Problem, w0: &ParamVector, log: &mut JsonlSink<Vec<u8>>) -> Result<RunRecord> {
    let mut null = NullSink;
    let sink: &mut dyn crate::sim::EventSink = if cell.event_log { log } else { &mut null };
    match cell.algorithm {
        Algorithm::FedBuff => run_simulation(problem, w0, &cell.hyper, &cell.sim, sink),
        Algorithm::PureAsync => run_pure_async(problem, w0, &cell.hyper, &cell.sim, sink),
        Algorithm::FedAvgSync => {
            let sync = cell
                .fedavg
                .ok_or_else(|| Error::contract("FedAvg cell without round configuration"))?;
            run_fedavg_sync(problem, w0, &cell.hyper, &sync, cell.horizon, cell.seed, false, sink)
        }
    }
}

/// Run one cell and write `metrics.csv`, `events.jsonl` and `record.json`
/// under `runs/<cell>/`. Runtime aborts are captured in the outcome.
pub fn run_cell(cell: &CellSpec, problem: &Problem, w0: &ParamVector, exp_dir: &Path) -> Result<CellOutcome> {
    let fingerprint = cell.fingerprint();
    let mut log = JsonlSink::new(Vec::new());
    let (mut record, error) = match execute(cell, problem, w0, &mut log) {
        Ok(r) => (r, None),
        Err(Error::Aborted { source, partial }) => {
            log::warn!("cell {} aborted: {source}", cell.dir_name());
            (*partial, Some(source.to_string()))
        }
        Err(e) if e.is_runtime_abort() => {
            let mut r = RunRecord::new(cell.algorithm, cell.horizon, w0.clone());
            r.completed = false;
            (r, Some(e.to_string()))
        }
        Err(e) => return Err(e),
    };
    record.fingerprint = fingerprint.clone();
    let status = if error.is_none() {
        ArtifactStatus::Complete
    } else {
        ArtifactStatus::Partial
    };

    let base = format!("runs/{}", cell.dir_name());
    let mut entries = Vec::new();
    let mut csv = Vec::new();
    record.write_csv(&mut csv)?;
    entries.push(write_artifact(exp_dir, &format!("{base}/metrics.csv"), &csv, &fingerprint, status)?);
    if cell.event_log {
        let events = log.into_inner();
        entries.push(write_artifact(exp_dir, &format!("{base}/events.jsonl"), &events, &fingerprint, status)?);
    }
    let sidecar = CellRecord {
        fingerprint: fingerprint.clone(),
        status,
        error: error.clone(),
        cell: cell.clone(),
        summary: record.summary(),
    };
    entries.push(write_artifact(
        exp_dir,
        &format!("{base}/record.json"),
        &json_bytes(&sidecar)?,
        &fingerprint,
        status,
    )?);
    Ok(CellOutcome {
        spec: cell.clone(),
        record,
        error,
        entries,
    })
}

fn summarize(
    cfg: &ExperimentConfig,
    problem: &Problem,
    constants: &ProblemConstants,
    w0: &ParamVector,
    outcomes: &[CellOutcome],
    fingerprint: &str,
) -> Result<ExperimentSummary> {
    let mut horizons = Vec::new();
    let mut fit_points = Vec::new();
    let mut sorted = cfg.horizons.clone();
    sorted.sort_unstable();
    for &h in &sorted {
        let done: Vec<&CellOutcome> = outcomes
            .iter()
            .filter(|c| c.spec.horizon == h && c.completed())
            .collect();
        let sample = outcomes
            .iter()
            .find(|c| c.spec.horizon == h)
            .ok_or_else(|| Error::contract(format!("no cell for horizon {h}")))?;
        let tau = if cfg.algorithm == Algorithm::FedAvgSync { 0 } else { cfg.sim.tau_max };
        let inputs = BoundInputs::from_problem(problem, constants, w0, &sample.spec.hyper, tau, h)?;
        let bound_value = crate::analysis::theorem_bound(&inputs)?;
        let (lhs, se, satisfied) = if done.len() >= 2 {
            let curves: Vec<Vec<f64>> = done.iter().map(|c| c.record.grad_norm_series()).collect();
            let agg = aggregate_curves(&curves)?;
            fit_points.push((h, agg.time_average));
            let satisfied = match bound_precondition_failure(cfg, constants, h, done.len()) {
                None => Some(compare_with_bound(inputs, &agg)?.satisfied),
                Some(_) => None,
            };
            (Some(agg.time_average), Some(agg.time_average_stderr), satisfied)
        } else {
            (done.first().map(|c| c.record.time_average_grad_norm_sq()), None, None)
        };
        horizons.push(HorizonSummary {
            horizon: h,
            seeds_completed: done.len(),
            bound_inputs: inputs,
            bound_value,
            empirical_lhs: lhs,
            standard_error: se,
            satisfied,
        });
    }
    let rate_fit = if fit_points.len() >= 4 && fit_points.len() == sorted.len() {
        let (hs, vs): (Vec<u64>, Vec<f64>) = fit_points.into_iter().unzip();
        fit_rate(&hs, &vs).ok()
    } else {
        None
    };
    let last = horizons.last().cloned().expect("validated horizons are non-empty");
    Ok(ExperimentSummary {
        algorithm: cfg.algorithm,
        experiment_fingerprint: fingerprint.to_string(),
        bound_inputs: last.bound_inputs,
        bound_value: last.bound_value,
        empirical_lhs: last.empirical_lhs,
        standard_error: last.standard_error,
        satisfied: last.satisfied,
        rate_fit,
        horizons,
    })
}

/// Remove files listed by a previous manifest in `dir`, so that re-running an
/// experiment never leaves unlisted artifacts behind.
fn clear_previous(dir: &Path) -> Result<()> {
    if let Some(old) = Manifest::load(dir)? {
        for e in &old.files {
            let p = dir.join(&e.path);
            if p.is_file() {
                std::fs::remove_file(&p)?;
            }
        }
        std::fs::remove_file(dir.join(super::artifacts::MANIFEST_FILE))?;
    }
    Ok(())
}

/// Validate, run every cell (on `jobs` worker threads) and persist artifacts
/// under `out_root/cfg.output_dir`.
pub fn run_experiment(cfg: &ExperimentConfig, out_root: &Path, jobs: usize) -> Result<ExperimentOutcome> {
    let cells = cfg.resolve()?;
    let (problem, constants) = generate_problem(&cfg.problem)?;
    let w0 = cfg.problem.initial_model();
    let dir = out_root.join(&cfg.output_dir);
    std::fs::create_dir_all(&dir)?;
    clear_previous(&dir)?;
    let fingerprint = experiment_fingerprint(&cells);

    let mut manifest = Manifest {
        experiment_fingerprint: fingerprint.clone(),
        files: Vec::new(),
    };
    let toml_text = cfg.to_toml_string()?;
    manifest.upsert(write_artifact(
        &dir,
        CONFIG_FILE,
        toml_text.as_bytes(),
        &fingerprint,
        ArtifactStatus::Complete,
    )?);

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start {jobs} worker threads: {e}")))?;
    let results: Vec<Result<CellOutcome>> = pool.install(|| {
        cells
            .par_iter()
            .map(|cell| run_cell(cell, &problem, &w0, &dir))
            .collect()
    });
    let mut outcomes = Vec::with_capacity(results.len());
    for r in results {
        let outcome = r?;
        for e in &outcome.entries {
            manifest.upsert(e.clone());
        }
        outcomes.push(outcome);
    }

    let summary = summarize(cfg, &problem, &constants, &w0, &outcomes, &fingerprint)?;
    let status = if outcomes.iter().all(CellOutcome::completed) {
        ArtifactStatus::Complete
    } else {
        ArtifactStatus::Partial
    };
    manifest.upsert(write_artifact(&dir, SUMMARY_FILE, &json_bytes(&summary)?, &fingerprint, status)?);
    manifest.save(&dir)?;
    Ok(ExperimentOutcome {
        dir,
        cells: outcomes,
        summary,
        manifest,
    })
}
