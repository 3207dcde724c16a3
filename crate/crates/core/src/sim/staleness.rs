use serde::{Deserialize, Serialize};

use super::delay::{DelayModel, Leg};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StalenessMode {
    /// Abort the run on the first update older than `tau_max`.
    #[default]
    Enforce,
    /// Log violations and continue.
    Observe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StalenessRecord {
    pub client: usize,
    pub download_step: u64,
    pub apply_step: u64,
    pub staleness: u64,
}

impl StalenessRecord {
    pub fn new(client: usize, download_step: u64, apply_step: u64) -> Result<Self> {
        if apply_step < download_step {
            return Err(Error::contract(format!(
                "client {client}: applied at step {apply_step} before its download at {download_step}"
            )));
        }
        Ok(StalenessRecord {
            client,
            download_step,
            apply_step,
            staleness: apply_step - download_step,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StalenessOutcome {
    Within,
    Violated,
}

/// Every upload's staleness, in server steps.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StalenessAudit {
    pub records: Vec<StalenessRecord>,
    pub max_staleness: u64,
    pub violations: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AuditSummary {
    pub uploads: u64,
    pub max_staleness: u64,
    pub mean_staleness: f64,
    pub violations: u64,
}

impl StalenessAudit {
    pub fn summary(&self) -> AuditSummary {
        let total: u64 = self.records.iter().map(|r| r.staleness).sum();
        AuditSummary {
            uploads: self.records.len() as u64,
            max_staleness: self.max_staleness,
            mean_staleness: if self.records.is_empty() {
                0.0
            } else {
                total as f64 / self.records.len() as f64
            },
            violations: self.violations,
        }
    }
}

/// Append `record` to the audit and check it against `tau_max`.
pub fn enforce_staleness(
    audit: &mut StalenessAudit,
    record: StalenessRecord,
    tau_max: u64,
    mode: StalenessMode,
) -> Result<StalenessOutcome> {
    audit.records.push(record);
    audit.max_staleness = audit.max_staleness.max(record.staleness);
    if record.staleness <= tau_max {
        return Ok(StalenessOutcome::Within);
    }
    audit.violations += 1;
    match mode {
        StalenessMode::Enforce => Err(Error::StalenessViolation {
            client: record.client,
            download_step: record.download_step,
            apply_step: record.apply_step,
            tau_max,
        }),
        StalenessMode::Observe => {
            log::warn!(
                "client {} update has staleness {} > tau {}",
                record.client,
                record.staleness,
                tau_max
            );
            Ok(StalenessOutcome::Violated)
        }
    }
}

/// Worst-case staleness of the event-driven engine under `delay`, or `None`
/// when the delays admit unboundedly many uploads in a finite window.
///
/// A client snapshots at its download completion and is applied when its
/// upload lands `u ≤ u_max` later. In that window another client `j` can
/// upload at most `⌊u/r_j⌋ + 1` times, with `r_j` its minimum round trip
/// (one time when `u = 0`, since same-instant events run in creation order).
/// Together with at most `K − 1` deltas already buffered, that caps the number
/// of flushes in the window.
pub fn event_driven_staleness_bound(delay: &DelayModel, n: usize, k: usize) -> Option<u64> {
    let k = k.max(1) as u64;
    let mut worst = 0u64;
    for i in 0..n {
        let window = delay.max_delay(i, Leg::Upload);
        let mut others = 0u64;
        for j in (0..n).filter(|&j| j != i) {
            let count = if window == 0.0 {
                1
            } else {
                let round_trip = delay.min_delay(j, Leg::Download) + delay.min_delay(j, Leg::Upload);
                if round_trip <= 0.0 {
                    return None;
                }
                (window / round_trip).floor() as u64 + 1
            };
            others += count;
        }
        worst = worst.max(others.div_ceil(k));
    }
    Some(worst)
}
