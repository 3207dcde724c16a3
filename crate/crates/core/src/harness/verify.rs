//! Post-hoc analyses over a finished experiment directory: the bound check
//! and the rate fit. Both recompute everything from the stored CSVs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::artifacts::{json_bytes, write_artifact, ArtifactStatus, Manifest};
use super::config::{CellSpec, ExperimentConfig};
use super::run::{bound_precondition_failure, experiment_fingerprint, CONFIG_FILE};
use crate::analysis::{
    aggregate_curves, compare_with_bound, fit_rate, AggregatedCurve, BoundInputs, BoundReport,
    RateFit, BOUND_TOLERANCE,
};
use crate::error::{Error, Result};
use crate::objectives::generate_problem;
use crate::record::read_metrics_csv_file;

pub const BOUND_REPORT_FILE: &str = "bound_report.json";
pub const RATE_FIT_FILE: &str = "rate_fit.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub satisfied: bool,
    pub tolerance: f64,
    pub reports: Vec<BoundReport>,
}

/// A finished experiment as found on disk.
pub struct StoredExperiment {
    pub config: ExperimentConfig,
    pub cells: Vec<CellSpec>,
    pub manifest: Manifest,
}

impl StoredExperiment {
    pub fn open(dir: &Path) -> Result<Self> {
        let config = ExperimentConfig::load(&dir.join(CONFIG_FILE), &[])?;
        let cells = config.resolve()?;
        let manifest = Manifest::load(dir)?.ok_or_else(|| {
            Error::contract(format!("{} has no manifest; run the experiment first", dir.display()))
        })?;
        if manifest.experiment_fingerprint != experiment_fingerprint(&cells) {
            return Err(Error::contract(format!(
                "{} was modified after the run: its fingerprint no longer matches the manifest",
                dir.join(CONFIG_FILE).display()
            )));
        }
        Ok(StoredExperiment { config, cells, manifest })
    }

    /// Per-seed gradient-norm curves of the completed cells at `horizon`.
    pub fn curves(&self, dir: &Path, horizon: u64) -> Result<Vec<Vec<f64>>> {
        let mut curves = Vec::new();
        for cell in self.cells.iter().filter(|c| c.horizon == horizon) {
            let rel = format!("runs/{}/metrics.csv", cell.dir_name());
            let entry = self
                .manifest
                .entry(&rel)
                .ok_or_else(|| Error::contract(format!("manifest does not list {rel}")))?;
            if entry.fingerprint != cell.fingerprint() {
                return Err(Error::contract(format!("{rel} belongs to a different configuration")));
            }
            if entry.status != ArtifactStatus::Complete {
                continue;
            }
            let rows = read_metrics_csv_file(&dir.join(&rel))?;
            if rows.len() as u64 != horizon {
                return Err(Error::contract(format!(
                    "{rel} has {} rows, expected {horizon}",
                    rows.len()
                )));
            }
            curves.push(rows.iter().map(|r| r.grad_norm_sq).collect());
        }
        Ok(curves)
    }

    pub fn aggregate(&self, dir: &Path, horizon: u64) -> Result<AggregatedCurve> {
        aggregate_curves(&self.curves(dir, horizon)?)
    }
}

fn persist(dir: &Path, manifest: &mut Manifest, file: &str, bytes: &[u8]) -> Result<()> {
    let fp = manifest.experiment_fingerprint.clone();
    manifest.upsert(write_artifact(dir, file, bytes, &fp, ArtifactStatus::Complete)?);
    manifest.save(dir)
}

/// Compare the multi-seed estimate at every horizon with the bound. Refuses
/// (contract error) when the bound's preconditions are not met.
pub fn verify_bound(dir: &Path) -> Result<VerifyReport> {
    let mut stored = StoredExperiment::open(dir)?;
    let cfg = &stored.config;
    let (problem, constants) = generate_problem(&cfg.problem)?;
    let w0 = cfg.problem.initial_model();
    let mut horizons = cfg.horizons.clone();
    horizons.sort_unstable();

    let mut reports = Vec::new();
    for &h in &horizons {
        let curves = stored.curves(dir, h)?;
        if let Some(why) = bound_precondition_failure(cfg, &constants, h, curves.len()) {
            return Err(Error::contract(format!("verify-bound refused: {why}")));
        }
        let hyper = &stored
            .cells
            .iter()
            .find(|c| c.horizon == h)
            .expect("every horizon has cells")
            .hyper;
        let inputs = BoundInputs::from_problem(&problem, &constants, &w0, hyper, cfg.sim.tau_max, h)?;
        reports.push(compare_with_bound(inputs, &aggregate_curves(&curves)?)?);
    }
    let report = VerifyReport {
        satisfied: reports.iter().all(|r| r.satisfied),
        tolerance: BOUND_TOLERANCE,
        reports,
    };
    persist(dir, &mut stored.manifest, BOUND_REPORT_FILE, &json_bytes(&report)?)?;
    Ok(report)
}

/// Fit the log-log slope of the time-averaged squared gradient norm across
/// the experiment's horizons.
pub fn fit_rate_dir(dir: &Path) -> Result<RateFit> {
    let mut stored = StoredExperiment::open(dir)?;
    let mut horizons = stored.config.horizons.clone();
    horizons.sort_unstable();
    let mut values = Vec::with_capacity(horizons.len());
    for &h in &horizons {
        values.push(stored.aggregate(dir, h)?.time_average);
    }
    let fit = fit_rate(&horizons, &values)?;
    persist(dir, &mut stored.manifest, RATE_FIT_FILE, &json_bytes(&fit)?)?;
    Ok(fit)
}
