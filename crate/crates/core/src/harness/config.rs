//! Declarative experiment files, command-line overrides and cell resolution.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::schedule_stepsizes;
use crate::baselines::SyncRoundConfig;
use crate::error::{Error, Result};
use crate::objectives::{generate_problem, ProblemSpec};
use crate::protocol::HyperParams;
use crate::record::Algorithm;
use crate::sim::{ArrivalMode, DelayModel, SimConfig, StalenessMode};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    /// η = 1/(Q√(LT)), β = 1/K, resolved per horizon from the problem's L.
    Auto,
    Manual,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSection {
    pub schedule: ScheduleMode,
    pub q: usize,
    pub k: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub full_batch: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSection {
    pub mode: ArrivalMode,
    #[serde(default)]
    pub tau_max: u64,
    #[serde(default)]
    pub staleness: StalenessMode,
    /// Write `events.jsonl` for every cell.
    #[serde(default = "yes")]
    pub event_log: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delay: Option<DelayModel>,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FedAvgSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clients_per_round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aggregation_weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    pub horizons: Vec<u64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub problem: ProblemSpec,
    pub hyper: HyperSection,
    pub sim: SimSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedavg: Option<FedAvgSection>,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("experiment")
}

/// One fully resolved (seed, horizon) run. Its canonical JSON is what the
/// fingerprint hashes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub algorithm: Algorithm,
    pub seed: u64,
    pub horizon: u64,
    pub problem: ProblemSpec,
    pub hyper: HyperParams,
    pub sim: SimConfig,
    pub event_log: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fedavg: Option<SyncRoundConfig>,
}

impl CellSpec {
    pub fn fingerprint(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("cell specs always serialise");
        hex::encode(Sha256::digest(&canonical))
    }

    /// Directory name of the cell inside `runs/`.
    pub fn dir_name(&self) -> String {
        format!("{}_T{}_s{}", self.algorithm.name(), self.horizon, self.seed)
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = text.parse()?;
        for ov in overrides {
            apply_override(&mut table, ov)?;
        }
        Ok(table.try_into()?)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Check every invariant and expand into (seed × horizon) cells, in
    /// horizon-major order. The first violated invariant is reported.
    pub fn resolve(&self) -> Result<Vec<CellSpec>> {
        if self.seeds.is_empty() {
            return Err(Error::config("ExperimentConfig.seeds must be non-empty"));
        }
        let mut seen = HashSet::new();
        if let Some(dup) = self.seeds.iter().find(|s| !seen.insert(**s)) {
            return Err(Error::config(format!(
                "ExperimentConfig.seeds must be distinct (seed {dup} repeats)"
            )));
        }
        if self.horizons.is_empty() {
            return Err(Error::config("ExperimentConfig.horizons must be non-empty"));
        }
        let mut seen = HashSet::new();
        for &h in &self.horizons {
            if h < 1 {
                return Err(Error::config("ExperimentConfig.horizons entries must be >= 1"));
            }
            if !seen.insert(h) {
                return Err(Error::config(format!(
                    "ExperimentConfig.horizons must be distinct (horizon {h} repeats)"
                )));
            }
        }
        self.problem.validate()?;
        let n = self.problem.n;

        let hs = &self.hyper;
        let probe = HyperParams {
            full_batch: hs.full_batch,
            ..HyperParams::new(hs.q, 1.0, 1.0, hs.k, hs.batch_size)
        };
        probe.validate(n)?;
        match hs.schedule {
            ScheduleMode::Auto => {
                if hs.eta.is_some() || hs.beta.is_some() {
                    return Err(Error::config(
                        "HyperParams.eta/beta must be omitted when schedule = \"auto\"",
                    ));
                }
            }
            ScheduleMode::Manual => {
                if hs.eta.is_none() {
                    return Err(Error::config("HyperParams.eta is required when schedule = \"manual\""));
                }
                if hs.beta.is_none() {
                    return Err(Error::config("HyperParams.beta is required when schedule = \"manual\""));
                }
            }
        }

        let delay = self.sim.delay.clone().unwrap_or_else(|| DelayModel::zero(n));
        let fedavg = match self.algorithm {
            Algorithm::FedAvgSync => {
                let section = self.fedavg.clone().unwrap_or(FedAvgSection {
                    clients_per_round: None,
                    aggregation_weight: None,
                });
                let m = section.clients_per_round.unwrap_or(n);
                let cfg = SyncRoundConfig {
                    clients_per_round: m,
                    aggregation_weight: section.aggregation_weight.unwrap_or(1.0 / m.max(1) as f64),
                };
                cfg.validate(n)?;
                Some(cfg)
            }
            _ => {
                if self.fedavg.is_some() {
                    return Err(Error::config(
                        "ExperimentConfig.fedavg is only meaningful with algorithm = \"fed_avg_sync\"",
                    ));
                }
                None
            }
        };

        let l = match hs.schedule {
            ScheduleMode::Auto => generate_problem(&self.problem)?.1.l,
            ScheduleMode::Manual => 0.0,
        };

        let mut warned = false;
        let mut cells = Vec::with_capacity(self.seeds.len() * self.horizons.len());
        for &horizon in &self.horizons {
            let (eta, beta) = match hs.schedule {
                ScheduleMode::Auto => {
                    let s = schedule_stepsizes(l, hs.q, hs.k, horizon)?;
                    (s.eta, s.beta)
                }
                ScheduleMode::Manual => (hs.eta.unwrap_or_default(), hs.beta.unwrap_or_default()),
            };
            let hyper = HyperParams {
                full_batch: hs.full_batch,
                ..HyperParams::new(hs.q, eta, beta, hs.k, hs.batch_size)
            };
            hyper.validate(n)?;
            for &seed in &self.seeds {
                let sim = SimConfig {
                    mode: self.sim.mode,
                    tau_max: self.sim.tau_max,
                    delay: delay.clone(),
                    horizon_t: horizon,
                    n,
                    seed,
                    staleness: self.sim.staleness,
                    record_trajectory: false,
                };
                sim.validate(n)?;
                if !warned {
                    if let Some(w) = sim.staleness_cap_warning(hs.k) {
                        log::warn!("{w}");
                    }
                    warned = true;
                }
                cells.push(CellSpec {
                    algorithm: self.algorithm,
                    seed,
                    horizon,
                    problem: self.problem.clone(),
                    hyper: hyper.clone(),
                    sim,
                    event_log: self.sim.event_log,
                    fedavg,
                });
            }
        }
        Ok(cells)
    }
}

/// Apply `a.b.c=VALUE`. The value is read as a TOML literal when possible
/// (`3`, `0.5`, `true`, `[1, 2]`, `"text"`) and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not KEY=VALUE")))?;
    let key = key.trim();
    let path: Vec<&str> = key.split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} is malformed")));
    }
    let raw = raw.trim();
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let (last, parents) = path.split_last().expect("split yields at least one part");
    let mut cursor = table;
    for part in parents {
        let entry = cursor
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cursor = entry.as_table_mut().ok_or_else(|| {
            Error::config(format!("override {key:?}: {part:?} is not a table"))
        })?;
    }
    cursor.insert(last.to_string(), value);
    Ok(())
}
