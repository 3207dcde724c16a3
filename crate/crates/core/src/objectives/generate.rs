use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClientDataset, DataPoint, Loss, Problem, ProblemConstants};
use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::{stream, RngStream, StreamTag};

/// Probability that a logistic label is flipped after generation.
const LABEL_NOISE: f64 = 0.1;
/// Number of seeded random probe points added to the grid.
const RANDOM_PROBES: usize = 100;
/// Upper limit on the size of the regular part of the probe set.
const MAX_GRID_PROBES: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    QuadraticMixture,
    LogisticNonconvex,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSpec {
    pub family: Family,
    pub n: usize,
    pub d: usize,
    /// Scales the per-client center (quadratic) or feature shift (logistic);
    /// γ² grows monotonically with it.
    #[serde(default)]
    pub heterogeneity_shift: f64,
    #[serde(default)]
    pub regularizer_weight: f64,
    /// Global multiplier on the loss; L is proportional to it.
    #[serde(default = "one")]
    pub scale: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_points")]
    pub points_per_client: usize,
    /// Standard deviation of the per-point offsets around a client's center;
    /// controls σ².
    #[serde(default = "one")]
    pub point_spread: f64,
    /// Every coordinate of the initial server model w⁰.
    #[serde(default)]
    pub init_value: f64,
    /// Half-width R of the probe box [−R, R]^d.
    #[serde(default = "default_radius")]
    pub probe_radius: f64,
}

fn one() -> f64 {
    1.0
}

fn default_points() -> usize {
    16
}

fn default_radius() -> f64 {
    5.0
}

impl ProblemSpec {
    pub fn quadratic(n: usize, d: usize, scale: f64) -> Self {
        ProblemSpec {
            family: Family::QuadraticMixture,
            n,
            d,
            heterogeneity_shift: 1.0,
            regularizer_weight: 0.0,
            scale,
            seed: 0,
            points_per_client: default_points(),
            point_spread: 1.0,
            init_value: 0.0,
            probe_radius: default_radius(),
        }
    }

    pub fn logistic(n: usize, d: usize, regularizer_weight: f64) -> Self {
        ProblemSpec {
            family: Family::LogisticNonconvex,
            regularizer_weight,
            ..ProblemSpec::quadratic(n, d, 1.0)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 {
            return Err(Error::config("ProblemSpec.n must be >= 1"));
        }
        if self.d < 1 {
            return Err(Error::config("ProblemSpec.d must be >= 1"));
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return Err(Error::config(format!(
                "ProblemSpec.scale must be > 0 (got {})",
                self.scale
            )));
        }
        if !(self.heterogeneity_shift >= 0.0 && self.heterogeneity_shift.is_finite()) {
            return Err(Error::config(
                "ProblemSpec.heterogeneity_shift must be finite and >= 0",
            ));
        }
        if !(self.regularizer_weight >= 0.0 && self.regularizer_weight.is_finite()) {
            return Err(Error::config(
                "ProblemSpec.regularizer_weight must be finite and >= 0",
            ));
        }
        if self.points_per_client < 1 {
            return Err(Error::config("ProblemSpec.points_per_client must be >= 1"));
        }
        if !(self.point_spread >= 0.0 && self.point_spread.is_finite()) {
            return Err(Error::config(
                "ProblemSpec.point_spread must be finite and >= 0",
            ));
        }
        if !self.init_value.is_finite() {
            return Err(Error::config("ProblemSpec.init_value must be finite"));
        }
        if !(self.probe_radius > 0.0 && self.probe_radius.is_finite()) {
            return Err(Error::config("ProblemSpec.probe_radius must be > 0"));
        }
        Ok(())
    }

    pub fn loss(&self) -> Loss {
        match self.family {
            Family::QuadraticMixture => Loss::Quadratic { scale: self.scale },
            Family::LogisticNonconvex => Loss::Logistic {
                scale: self.scale,
                regularizer_weight: self.regularizer_weight,
            },
        }
    }

    pub fn initial_model(&self) -> ParamVector {
        ParamVector::filled(self.d, self.init_value)
    }

    pub fn probe_points(&self) -> Vec<ParamVector> {
        probe_points(self.d, self.probe_radius, self.seed)
    }
}

fn gaussian(rng: &mut RngStream, d: usize, sd: f64) -> Vec<f64> {
    (0..d)
        .map(|_| sd * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// Build the n client datasets for `spec` and their constants (batch size 1;
/// use [`ProblemConstants::with_batch_size`] for σ̂²).
pub fn generate_problem(spec: &ProblemSpec) -> Result<(Problem, ProblemConstants)> {
    spec.validate()?;
    let clients = match spec.family {
        Family::QuadraticMixture => quadratic_clients(spec)?,
        Family::LogisticNonconvex => logistic_clients(spec)?,
    };
    let problem = Problem::new(spec.loss(), clients)?;
    let constants = match spec.family {
        Family::QuadraticMixture => quadratic_constants(&problem, spec.scale)?,
        Family::LogisticNonconvex => logistic_constants(&problem, spec),
    };
    Ok((problem, constants))
}

/// Points come in antithetic pairs `c ± z` so every client's empirical mean is
/// its center (exactly when the center is zero).
fn quadratic_clients(spec: &ProblemSpec) -> Result<Vec<ClientDataset>> {
    (0..spec.n)
        .map(|i| {
            let mut rng = stream(spec.seed, StreamTag::Data, i as u64, 0);
            let center = gaussian(&mut rng, spec.d, spec.heterogeneity_shift);
            let mut points = Vec::with_capacity(spec.points_per_client);
            for _ in 0..spec.points_per_client / 2 {
                let z = gaussian(&mut rng, spec.d, spec.point_spread);
                let plus = center.iter().zip(&z).map(|(c, o)| c + o).collect();
                let minus = center.iter().zip(&z).map(|(c, o)| c - o).collect();
                points.push(DataPoint::center(plus));
                points.push(DataPoint::center(minus));
            }
            if spec.points_per_client % 2 == 1 {
                points.push(DataPoint::center(center.clone()));
            }
            ClientDataset::new(i, points)
        })
        .collect()
}

fn logistic_clients(spec: &ProblemSpec) -> Result<Vec<ClientDataset>> {
    let mut shared = stream(spec.seed, StreamTag::Data, u64::MAX, 0);
    let w_true = gaussian(&mut shared, spec.d, 1.0);
    (0..spec.n)
        .map(|i| {
            let mut rng = stream(spec.seed, StreamTag::Data, i as u64, 0);
            let shift = gaussian(&mut rng, spec.d, spec.heterogeneity_shift);
            let points = (0..spec.points_per_client)
                .map(|_| {
                    let z = gaussian(&mut rng, spec.d, spec.point_spread);
                    let x: Vec<f64> = shift.iter().zip(&z).map(|(s, o)| s + o).collect();
                    let margin: f64 = x.iter().zip(&w_true).map(|(a, b)| a * b).sum();
                    let mut y = if margin >= 0.0 { 1.0 } else { -1.0 };
                    if rng.random::<f64>() < LABEL_NOISE {
                        y = -y;
                    }
                    DataPoint::new(x, y)
                })
                .collect();
            ClientDataset::new(i, points)
        })
        .collect()
}

fn mean_of(points: impl Iterator<Item = Vec<f64>>, d: usize) -> Vec<f64> {
    let mut acc = vec![0.0; d];
    let mut count = 0usize;
    for p in points {
        for (a, v) in acc.iter_mut().zip(&p) {
            *a += v;
        }
        count += 1;
    }
    acc.iter_mut().for_each(|a| *a /= count as f64);
    acc
}

fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Exact constants for `f_i(w) = (scale/2)·mean_ξ‖w − x_ξ‖²`:
/// L = scale, σ² = scale²·max_i mean‖x − c_i‖², γ² = scale²·(1/n)Σ‖c_i − c̄‖²,
/// f* = f(c̄).
fn quadratic_constants(problem: &Problem, scale: f64) -> Result<ProblemConstants> {
    let d = problem.dim();
    let centers: Vec<Vec<f64>> = problem
        .clients()
        .iter()
        .map(|c| mean_of(c.points().iter().map(|p| p.features.clone()), d))
        .collect();
    let sigma_sq = problem
        .clients()
        .iter()
        .zip(&centers)
        .map(|(c, ci)| {
            let s: f64 = c.points().iter().map(|p| dist_sq(&p.features, ci)).sum();
            scale * scale * s / c.len() as f64
        })
        .fold(0.0, f64::max);
    let c_bar = mean_of(centers.iter().cloned(), d);
    let spread: f64 = centers.iter().map(|c| dist_sq(c, &c_bar)).sum();
    let gamma_sq = scale * scale * spread / problem.n() as f64;
    let f_star = problem.global_objective(&ParamVector::from(c_bar))?;
    Ok(ProblemConstants::new(scale, sigma_sq, gamma_sq, f_star, 1))
}

/// Closed-form upper bounds for the logistic family. The regularizer gradient
/// is identical for every sample and client, so it cancels from both σ² and
/// γ²; the data part of a per-sample gradient has norm at most ‖x‖.
fn logistic_constants(problem: &Problem, spec: &ProblemSpec) -> ProblemConstants {
    let s = spec.scale;
    let mut max_norm_sq = 0.0_f64;
    let mut sigma_sq = 0.0_f64;
    let mut gamma_acc = 0.0;
    for c in problem.clients() {
        let norms_sq: Vec<f64> = c
            .points()
            .iter()
            .map(|p| p.features.iter().map(|v| v * v).sum())
            .collect();
        let m = norms_sq.len() as f64;
        max_norm_sq = norms_sq.iter().copied().fold(max_norm_sq, f64::max);
        sigma_sq = sigma_sq.max(norms_sq.iter().sum::<f64>() / m);
        let mean_norm = norms_sq.iter().map(|v| v.sqrt()).sum::<f64>() / m;
        gamma_acc += mean_norm * mean_norm;
    }
    let l = s * (max_norm_sq / 4.0 + 2.0 * spec.regularizer_weight);
    let gamma_sq = s * s * gamma_acc / problem.n() as f64;
    ProblemConstants::new(l, s * s * sigma_sq, gamma_sq, 0.0, 1)
}

/// Certificate set for the "for all w" assumptions: a regular grid over
/// [−R, R]^d plus 100 seeded uniform points in the same box.
pub fn probe_points(d: usize, radius: f64, seed: u64) -> Vec<ParamVector> {
    let mut probes = Vec::new();
    let levels: Option<Vec<f64>> = [5usize, 3]
        .into_iter()
        .find(|&m| (m as f64).powi(d as i32) <= MAX_GRID_PROBES as f64)
        .map(|m| {
            (0..m)
                .map(|j| -radius + 2.0 * radius * j as f64 / (m - 1) as f64)
                .collect()
        });
    match levels {
        Some(levels) => {
            let m = levels.len();
            let total = m.pow(d as u32);
            for mut code in 0..total {
                let mut w = ParamVector::zeros(d);
                for j in 0..d {
                    w[j] = levels[code % m];
                    code /= m;
                }
                probes.push(w);
            }
        }
        None => {
            probes.push(ParamVector::zeros(d));
            for j in 0..d {
                for sign in [-1.0, 1.0] {
                    let mut w = ParamVector::zeros(d);
                    w[j] = sign * radius;
                    probes.push(w);
                }
            }
        }
    }
    let mut rng = stream(seed, StreamTag::Probe, 0, 0);
    for _ in 0..RANDOM_PROBES {
        let w: Vec<f64> = (0..d).map(|_| rng.random_range(-radius..=radius)).collect();
        probes.push(w.into());
    }
    probes
}
