#![allow(dead_code)]

use fedbuff::objectives::{generate_problem, Problem, ProblemConstants, ProblemSpec};
use fedbuff::ParamVector;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn quadratic() -> (ProblemSpec, Problem, ProblemConstants) {
    let spec = ProblemSpec {
        seed: 17,
        ..ProblemSpec::quadratic(4, 4, 1.0)
    };
    let (p, c) = generate_problem(&spec).unwrap();
    (spec, p, c)
}

pub fn logistic() -> (ProblemSpec, Problem, ProblemConstants) {
    let spec = ProblemSpec {
        seed: 23,
        heterogeneity_shift: 0.5,
        ..ProblemSpec::logistic(4, 3, 0.1)
    };
    let (p, c) = generate_problem(&spec).unwrap();
    (spec, p, c)
}

/// The problem used by the bound and rate checks.
pub fn acceptance_spec() -> ProblemSpec {
    ProblemSpec {
        seed: 2024,
        init_value: 3.0,
        ..ProblemSpec::quadratic(4, 4, 0.01)
    }
}

pub fn uniform_point(rng: &mut impl Rng, d: usize, radius: f64) -> ParamVector {
    ParamVector::from(
        (0..d)
            .map(|_| rng.random_range(-radius..=radius))
            .collect::<Vec<f64>>(),
    )
}

pub fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn diff_norm(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Central finite-difference gradient of `f` at `w`.
pub fn fd_gradient(f: impl Fn(&ParamVector) -> f64, w: &ParamVector, h: f64) -> Vec<f64> {
    (0..w.dim())
        .map(|j| {
            let mut plus = w.clone();
            let mut minus = w.clone();
            plus[j] += h;
            minus[j] -= h;
            (f(&plus) - f(&minus)) / (2.0 * h)
        })
        .collect()
}

pub fn rel_err(approx: &[f64], exact: &[f64]) -> f64 {
    diff_norm(approx, exact) / norm(exact).max(norm(approx)).max(f64::MIN_POSITIVE)
}

use fedbuff::objectives::Family;
use fedbuff::protocol::HyperParams;
use fedbuff::sim::{ArrivalMode, DelayModel, SimConfig, StalenessMode};

/// A randomized FedBuff/baseline scenario.
pub struct Scenario {
    pub label: String,
    pub problem: Problem,
    pub w0: ParamVector,
    pub hp: HyperParams,
    pub sim: SimConfig,
}

fn random_family_spec(r: &mut ChaCha8Rng, n: usize, d: usize) -> ProblemSpec {
    let seed = r.random_range(0..10_000);
    let mut spec = if r.random_bool(0.5) {
        ProblemSpec::quadratic(n, d, r.random_range(0.2..1.5))
    } else {
        ProblemSpec::logistic(n, d, r.random_range(0.0..0.5))
    };
    spec.seed = seed;
    spec.heterogeneity_shift = r.random_range(0.0..2.0);
    spec.points_per_client = r.random_range(3..12);
    spec.init_value = r.random_range(-1.0..1.0);
    if spec.family == Family::LogisticNonconvex {
        spec.scale = r.random_range(0.5..1.5);
    }
    spec
}

/// Scenarios for the K = 1 reduction: n ∈ {2, 5, 10}, a mix of delay models
/// and both arrival modes.
pub fn k1_scenarios(count: usize, seed: u64) -> Vec<Scenario> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let n = [2, 5, 10][i % 3];
            let d = r.random_range(1..5);
            let spec = random_family_spec(&mut r, n, d);
            let (problem, _) = generate_problem(&spec).unwrap();
            let delay = match i % 4 {
                0 => DelayModel::Deterministic {
                    download: (0..n).map(|_| r.random_range(0..3) as f64).collect(),
                    upload: (0..n).map(|_| r.random_range(0..5) as f64 * 0.5).collect(),
                },
                1 => DelayModel::UniformInt { lo: 0, hi: r.random_range(1..6) },
                2 => DelayModel::Geometric { p: r.random_range(0.2..0.9), cap: r.random_range(1..8) },
                _ => DelayModel::zero(n),
            };
            let mode = if i % 5 == 4 {
                ArrivalMode::UniformArrival
            } else {
                ArrivalMode::EventDriven
            };
            let mut hp = HyperParams::new(
                r.random_range(1..4),
                r.random_range(0.01..0.2),
                r.random_range(0.3..1.0),
                1,
                r.random_range(1..4),
            );
            hp.full_batch = r.random_bool(0.2);
            let sim = SimConfig::new(mode, n, r.random_range(10..60), r.random_range(0..1_000_000))
                .with_tau(r.random_range(0..6))
                .with_staleness(StalenessMode::Observe)
                .with_delay(delay)
                .recording_trajectory();
            Scenario {
                label: format!("k1 #{i} n={n} {:?} {:?}", mode, spec.family),
                w0: spec.initial_model(),
                problem,
                hp,
                sim,
            }
        })
        .collect()
}

/// Scenarios for the synchronous reduction: K = n, zero delays, β = 1/n.
pub fn sync_scenarios(count: usize, seed: u64) -> Vec<Scenario> {
    let mut r = rng(seed);
    (0..count)
        .map(|i| {
            let n = r.random_range(1..9);
            let d = r.random_range(1..5);
            let spec = random_family_spec(&mut r, n, d);
            let (problem, _) = generate_problem(&spec).unwrap();
            let mut hp = HyperParams::new(
                r.random_range(1..5),
                r.random_range(0.01..0.2),
                1.0 / n as f64,
                n,
                r.random_range(1..4),
            );
            hp.full_batch = i % 4 == 0;
            let sim = SimConfig::new(ArrivalMode::EventDriven, n, r.random_range(5..40), r.random_range(0..1_000_000))
                .recording_trajectory();
            Scenario {
                label: format!("sync #{i} n={n} {:?}", spec.family),
                w0: spec.initial_model(),
                problem,
                hp,
                sim,
            }
        })
        .collect()
}
