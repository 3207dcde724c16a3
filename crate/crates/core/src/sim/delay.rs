use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Leg {
    Download,
    Upload,
}

/// Per-leg communication delay. Every variant is bounded by a finite cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DelayModel {
    /// Fixed per-client delays, one entry per client for each leg.
    Deterministic { download: Vec<f64>, upload: Vec<f64> },
    /// Integer delay uniform on `lo..=hi`, drawn independently per leg.
    UniformInt { lo: u64, hi: u64 },
    /// Failures before the first success with probability `p`, capped at `cap`.
    Geometric { p: f64, cap: u64 },
}

impl DelayModel {
    pub fn zero(n: usize) -> Self {
        DelayModel::constant(n, 0.0, 0.0)
    }

    pub fn constant(n: usize, download: f64, upload: f64) -> Self {
        DelayModel::Deterministic {
            download: vec![download; n],
            upload: vec![upload; n],
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        match self {
            DelayModel::Deterministic { download, upload } => {
                if download.len() != n || upload.len() != n {
                    return Err(Error::config(format!(
                        "DelayModel.deterministic needs {n} download and upload entries (got {} and {})",
                        download.len(),
                        upload.len()
                    )));
                }
                if download.iter().chain(upload).any(|d| !(*d >= 0.0 && d.is_finite())) {
                    return Err(Error::config(
                        "DelayModel.deterministic delays must be finite and >= 0",
                    ));
                }
            }
            DelayModel::UniformInt { lo, hi } => {
                if lo > hi {
                    return Err(Error::config(format!(
                        "DelayModel.uniform_int requires lo <= hi (got {lo} > {hi})"
                    )));
                }
            }
            DelayModel::Geometric { p, .. } => {
                if !(*p > 0.0 && *p <= 1.0) {
                    return Err(Error::config(format!(
                        "DelayModel.geometric requires 0 < p <= 1 (got {p})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, client: usize, leg: Leg, rng: &mut RngStream) -> f64 {
        match self {
            DelayModel::Deterministic { download, upload } => match leg {
                Leg::Download => download[client],
                Leg::Upload => upload[client],
            },
            DelayModel::UniformInt { lo, hi } => rng.random_range(*lo..=*hi) as f64,
            DelayModel::Geometric { p, cap } => {
                let mut failures = 0u64;
                while failures < *cap && rng.random::<f64>() >= *p {
                    failures += 1;
                }
                failures as f64
            }
        }
    }

    pub fn min_delay(&self, client: usize, leg: Leg) -> f64 {
        match self {
            DelayModel::Deterministic { .. } => self.fixed(client, leg),
            DelayModel::UniformInt { lo, .. } => *lo as f64,
            DelayModel::Geometric { .. } => 0.0,
        }
    }

    pub fn max_delay(&self, client: usize, leg: Leg) -> f64 {
        match self {
            DelayModel::Deterministic { .. } => self.fixed(client, leg),
            DelayModel::UniformInt { hi, .. } => *hi as f64,
            DelayModel::Geometric { p, cap } => {
                if *p >= 1.0 {
                    0.0
                } else {
                    *cap as f64
                }
            }
        }
    }

    fn fixed(&self, client: usize, leg: Leg) -> f64 {
        match (self, leg) {
            (DelayModel::Deterministic { download, .. }, Leg::Download) => download[client],
            (DelayModel::Deterministic { upload, .. }, Leg::Upload) => upload[client],
            _ => unreachable!("fixed() on a random delay model"),
        }
    }
}
