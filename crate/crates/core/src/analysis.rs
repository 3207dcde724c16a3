//! Convergence-bound evaluation, stepsize schedules, multi-seed aggregation
//! and log-log rate fitting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{Problem, ProblemConstants};
use crate::param::ParamVector;
use crate::protocol::HyperParams;
use crate::record::RunRecord;

/// Every symbol on the right-hand side of the FedBuff convergence bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundInputs {
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma_hat_sq: f64,
    pub gamma_sq: f64,
    pub f0_minus_fstar: f64,
    pub n: u64,
    #[serde(rename = "Q")]
    pub q: u64,
    #[serde(rename = "K")]
    pub k: u64,
    pub tau: u64,
    #[serde(rename = "T")]
    pub t: u64,
}

impl BoundInputs {
    /// Assemble inputs from a generated problem, the starting point and the run
    /// settings. With full-batch local steps the gradient noise vanishes, so
    /// σ̂² is taken as zero; otherwise σ̂² = σ²/b.
    pub fn from_problem(
        problem: &Problem,
        constants: &ProblemConstants,
        initial_model: &ParamVector,
        hp: &HyperParams,
        tau: u64,
        horizon: u64,
    ) -> Result<Self> {
        let f0 = problem.global_objective(initial_model)?;
        let sigma_hat_sq = if hp.full_batch {
            0.0
        } else {
            constants.sigma_sq / hp.batch_size as f64
        };
        let inputs = BoundInputs {
            l: constants.l,
            sigma_hat_sq,
            gamma_sq: constants.gamma_sq,
            f0_minus_fstar: (f0 - constants.f_star).max(0.0),
            n: problem.n() as u64,
            q: hp.q as u64,
            k: hp.k as u64,
            tau,
            t: horizon,
        };
        inputs.validate()?;
        Ok(inputs)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("L", self.l),
            ("sigma_hat_sq", self.sigma_hat_sq),
            ("gamma_sq", self.gamma_sq),
            ("f0_minus_fstar", self.f0_minus_fstar),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::contract(format!(
                    "BoundInputs.{name} must be finite and >= 0 (got {v})"
                )));
            }
        }
        for (name, v) in [("n", self.n), ("Q", self.q), ("K", self.k), ("T", self.t)] {
            if v < 1 {
                return Err(Error::contract(format!("BoundInputs.{name} must be >= 1")));
            }
        }
        Ok(())
    }
}

/// The bound split into its optimisation, noise and staleness parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundTerms {
    pub initial_gap: f64,
    pub noise: f64,
    pub drift: f64,
}

impl BoundTerms {
    pub fn total(&self) -> f64 {
        self.initial_gap + self.noise + self.drift
    }
}

pub fn bound_terms(inp: &BoundInputs) -> Result<BoundTerms> {
    inp.validate()?;
    let sqrt_l = inp.l.sqrt();
    let t = inp.t as f64;
    let sqrt_t = t.sqrt();
    let tau = inp.tau as f64;
    Ok(BoundTerms {
        initial_gap: 8.0 * sqrt_l * inp.f0_minus_fstar / sqrt_t,
        noise: 16.0 * sqrt_l * (inp.sigma_hat_sq + inp.gamma_sq) / sqrt_t,
        drift: 320.0
            * inp.l
            * (inp.q as f64 + 1.0)
            * (tau * tau + 1.0)
            * (inp.sigma_hat_sq + inp.n as f64 * inp.gamma_sq)
            / t,
    })
}

/// Upper bound on (1/T)·Σ_t E‖∇f(wᵗ)‖² under the prescribed schedule.
pub fn theorem_bound(inp: &BoundInputs) -> Result<f64> {
    Ok(bound_terms(inp)?.total())
}

/// Smallest horizon for which the bound is claimed: ⌈160·L·(Q+7)·(τ+1)³⌉.
pub fn horizon_threshold(l: f64, q: usize, tau: u64) -> Result<u64> {
    if !(l > 0.0 && l.is_finite()) || q < 1 {
        return Err(Error::contract(format!(
            "horizon_threshold needs L > 0 and Q >= 1 (got L = {l}, Q = {q})"
        )));
    }
    let raw = 160.0 * l * (q as f64 + 7.0) * (tau as f64 + 1.0).powi(3);
    // Products like 160·0.01 are not exact in binary; strip the last few ulps
    // before rounding up so that 115.99999999999999 and 116.00000000000001
    // both map to 116.
    let snapped = raw * (1.0 - 8.0 * f64::EPSILON);
    Ok((snapped.ceil() as u64).max(1))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub eta: f64,
    pub beta: f64,
}

/// η = 1/(Q·√(L·T)) and β = 1/K.
///
/// When `T` clears the horizon threshold for some τ this also implies
/// η ≤ 1/(4L(Q+1)); the implication is re-checked here and a failure is
/// reported as a contract error.
pub fn schedule_stepsizes(l: f64, q: usize, k: usize, t: u64) -> Result<Schedule> {
    if !(l > 0.0 && l.is_finite()) || t < 1 || q < 1 || k < 1 {
        return Err(Error::contract(format!(
            "schedule_stepsizes needs L > 0, T >= 1, Q >= 1, K >= 1 (got L = {l}, T = {t}, Q = {q}, K = {k})"
        )));
    }
    let eta = 1.0 / (q as f64 * (l * t as f64).sqrt());
    let beta = 1.0 / k as f64;
    if t >= horizon_threshold(l, q, 0)? && eta > local_stepsize_cap(l, q) {
        return Err(Error::contract(format!(
            "scheduled eta {eta} exceeds 1/(4L(Q+1)) = {} at T = {t}",
            local_stepsize_cap(l, q)
        )));
    }
    Ok(Schedule { eta, beta })
}

/// 1/(4L(Q+1)), the largest local stepsize the analysis admits.
pub fn local_stepsize_cap(l: f64, q: usize) -> f64 {
    1.0 / (4.0 * l * (q as f64 + 1.0))
}

/// Left-hand sides of the two stepsize conditions of the analysis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepsizeCheck {
    pub eta_cap: f64,
    /// max{4ηβKLQ, L²(τ²+1)(1+4ηβKL)φ, L²τ(τ+1)²(1+4ηβKL)φ}, required ≤ 1/4.
    pub coupling: f64,
    pub satisfied: bool,
}

pub fn check_stepsizes(l: f64, q: usize, k: usize, tau: u64, sched: &Schedule) -> StepsizeCheck {
    let (q, k, tau) = (q as f64, k as f64, tau as f64);
    let Schedule { eta, beta } = *sched;
    let phi = 8.0 * eta * eta * q * q * (1.0 + 2.0 * q) * (1.0 + beta * beta * k * k);
    let growth = 1.0 + 4.0 * eta * beta * k * l;
    let coupling = (4.0 * eta * beta * k * l * q)
        .max(l * l * (tau * tau + 1.0) * growth * phi)
        .max(l * l * tau * (tau + 1.0).powi(2) * growth * phi);
    let eta_cap = local_stepsize_cap(l, q as usize);
    StepsizeCheck {
        eta_cap,
        coupling,
        satisfied: eta <= eta_cap && coupling <= 0.25,
    }
}

/// Monte-Carlo estimate of the per-step and time-averaged expected squared
/// gradient norm across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedCurve {
    pub horizon: u64,
    pub seeds: usize,
    pub mean: Vec<f64>,
    pub stderr: Vec<f64>,
    pub time_average: f64,
    pub time_average_stderr: f64,
}

/// Sum in ascending order so the result does not depend on input order.
fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn mean_and_stderr(values: &mut [f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = sorted_sum(values) / m;
    let mut sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = sorted_sum(&mut sq) / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Aggregate raw ‖∇f(wᵗ)‖² series, one per seed.
pub fn aggregate_curves(curves: &[Vec<f64>]) -> Result<AggregatedCurve> {
    if curves.len() < 2 {
        return Err(Error::contract(format!(
            "aggregation needs at least 2 runs (got {})",
            curves.len()
        )));
    }
    let horizon = curves[0].len();
    if horizon == 0 {
        return Err(Error::contract("aggregation needs non-empty curves"));
    }
    if let Some(bad) = curves.iter().find(|c| c.len() != horizon) {
        return Err(Error::contract(format!(
            "mismatched horizons in aggregation: {horizon} vs {}",
            bad.len()
        )));
    }
    let mut mean = Vec::with_capacity(horizon);
    let mut stderr = Vec::with_capacity(horizon);
    let mut column = vec![0.0; curves.len()];
    for t in 0..horizon {
        for (slot, c) in column.iter_mut().zip(curves) {
            *slot = c[t];
        }
        let (m, se) = mean_and_stderr(&mut column);
        mean.push(m);
        stderr.push(se);
    }
    let mut per_seed: Vec<f64> = curves
        .iter()
        .map(|c| c.iter().sum::<f64>() / horizon as f64)
        .collect();
    let (time_average, time_average_stderr) = mean_and_stderr(&mut per_seed);
    Ok(AggregatedCurve {
        horizon: horizon as u64,
        seeds: curves.len(),
        mean,
        stderr,
        time_average,
        time_average_stderr,
    })
}

/// Aggregate completed runs that differ only in their seed.
pub fn aggregate_runs(records: &[RunRecord]) -> Result<AggregatedCurve> {
    if let Some(first) = records.first() {
        for r in records {
            if r.horizon != first.horizon {
                return Err(Error::contract(format!(
                    "mismatched horizons in aggregation: {} vs {}",
                    first.horizon, r.horizon
                )));
            }
            if r.rows.len() as u64 != r.horizon {
                return Err(Error::contract(format!(
                    "record has {} rows but horizon {}",
                    r.rows.len(),
                    r.horizon
                )));
            }
        }
    }
    let curves: Vec<Vec<f64>> = records.iter().map(RunRecord::grad_norm_series).collect();
    aggregate_curves(&curves)
}

/// Outcome of comparing the empirical left-hand side against the bound.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundReport {
    pub bound_inputs: BoundInputs,
    pub bound_value: f64,
    pub empirical_lhs: f64,
    pub standard_error: f64,
    pub satisfied: bool,
    pub rate_fit: Option<RateFit>,
}

/// Absolute slack allowed when comparing a zero estimate against a zero bound.
pub const BOUND_TOLERANCE: f64 = 1e-12;

/// `satisfied` means LHS + 2·stderr ≤ RHS up to [`BOUND_TOLERANCE`].
pub fn compare_with_bound(inputs: BoundInputs, curve: &AggregatedCurve) -> Result<BoundReport> {
    let bound_value = theorem_bound(&inputs)?;
    let upper = curve.time_average + 2.0 * curve.time_average_stderr;
    Ok(BoundReport {
        bound_inputs: inputs,
        bound_value,
        empirical_lhs: curve.time_average,
        standard_error: curve.time_average_stderr,
        satisfied: upper <= bound_value + BOUND_TOLERANCE * (1.0 + bound_value),
        rate_fit: None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub horizons: Vec<u64>,
    pub values: Vec<f64>,
    /// Least-squares slope of log(value) against log(T).
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the fit in log space.
    pub residual: f64,
}

/// Fit value ≈ c·T^slope by ordinary least squares on logarithms.
pub fn fit_rate(horizons: &[u64], values: &[f64]) -> Result<RateFit> {
    if horizons.len() != values.len() {
        return Err(Error::contract(format!(
            "fit_rate: {} horizons but {} values",
            horizons.len(),
            values.len()
        )));
    }
    if horizons.len() < 4 {
        return Err(Error::contract(format!(
            "fit_rate needs at least 4 horizons (got {})",
            horizons.len()
        )));
    }
    if horizons.windows(2).any(|w| w[0] >= w[1]) || horizons[0] == 0 {
        return Err(Error::contract("fit_rate: horizons must be positive and strictly increasing"));
    }
    if let Some(v) = values.iter().find(|v| !(**v > 0.0 && v.is_finite())) {
        return Err(Error::contract(format!(
            "fit_rate: values must be positive and finite (got {v})"
        )));
    }
    let xs: Vec<f64> = horizons.iter().map(|&t| (t as f64).ln()).collect();
    let ys: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    let m = xs.len() as f64;
    let x_bar = xs.iter().sum::<f64>() / m;
    let y_bar = ys.iter().sum::<f64>() / m;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - x_bar) * (y - y_bar)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - x_bar) * (x - x_bar)).sum();
    let slope = sxy / sxx;
    let intercept = y_bar - slope * x_bar;
    let sse: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    Ok(RateFit {
        horizons: horizons.to_vec(),
        values: values.to_vec(),
        slope,
        intercept,
        residual: (sse / m).sqrt(),
    })
}
