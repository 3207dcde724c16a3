//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any FAIL.

mod common;

use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use fedbuff::analysis::horizon_threshold;
use fedbuff::baselines::{run_fedavg_sync, run_pure_async, SyncRoundConfig};
use fedbuff::harness::{fit_rate_dir, run_experiment, verify_bound, ExperimentConfig, ScheduleMode};
use fedbuff::objectives::{Family, Problem, ProblemConstants, ProblemSpec};
use fedbuff::protocol::HyperParams;
use fedbuff::record::RunRecord;
use fedbuff::rng::{stream, StreamTag};
use fedbuff::sim::{
    event_driven_staleness_bound, run_simulation, ArrivalMode, DelayModel, JsonlSink, NullSink,
    SimConfig,
};
use fedbuff::{Error, ParamVector};
use rand::Rng;

type Outcome = Result<String, String>;
type Criterion = Box<dyn FnMut(&mut Audit) -> Outcome>;

/// Staleness observations gathered from every Enforce-mode run.
#[derive(Default)]
struct Audit {
    runs: usize,
    worst_excess: i64,
}

impl Audit {
    fn observe(&mut self, max_staleness: u64, tau: u64) {
        self.runs += 1;
        self.worst_excess = self.worst_excess.max(max_staleness as i64 - tau as i64);
    }
}

fn config_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn criterion_1(audit: &mut Audit) -> Outcome {
    let cfg = ExperimentConfig::load(&config_path("bound_check.toml"), &[]).map_err(|e| e.to_string())?;
    let p = &cfg.problem;
    check(
        p.family == Family::QuadraticMixture && p.n == 4 && p.d == 4 && p.scale == 0.01,
        || "bound_check.toml does not describe the n=4, d=4, L=0.01 quadratic".into(),
    )?;
    check(
        cfg.hyper.q == 2 && cfg.hyper.k == 2 && cfg.hyper.batch_size == 4 && cfg.hyper.schedule == ScheduleMode::Auto,
        || "bound_check.toml must use Q=2, K=2, b=4 and the auto schedule".into(),
    )?;
    let threshold = horizon_threshold(0.01, 2, 1).map_err(|e| e.to_string())?;
    check(
        cfg.sim.mode == ArrivalMode::UniformArrival && cfg.sim.tau_max == 1 && cfg.horizons == [threshold] && cfg.seeds.len() == 32,
        || format!("bound_check.toml must use uniform arrivals, tau=1, T={threshold}, 32 seeds"),
    )?;
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let outcome = run_experiment(&cfg, tmp.path(), 4).map_err(|e| e.to_string())?;
    for c in &outcome.cells {
        audit.observe(c.record.audit.max_staleness, cfg.sim.tau_max);
    }
    let report = verify_bound(&outcome.dir).map_err(|e| e.to_string())?;
    let r = &report.reports[0];
    let upper = r.empirical_lhs + 2.0 * r.standard_error;
    let detail = format!(
        "T={} seeds=32 lhs={:.4e} +2se={:.4e} <= bound={:.4e}",
        r.bound_inputs.t, r.empirical_lhs, upper, r.bound_value
    );
    check(report.satisfied && upper <= r.bound_value, || detail.clone())?;
    Ok(detail)
}

fn records_equal(a: &RunRecord, b: &RunRecord) -> bool {
    a.trajectory.len() == b.trajectory.len()
        && a.trajectory.iter().zip(&b.trajectory).all(|(x, y)| x.bits_eq(y))
}

fn criterion_2() -> Outcome {
    let scenarios = k1_scenarios(20, 2718);
    for s in &scenarios {
        let mut la = JsonlSink::new(Vec::new());
        let mut lb = JsonlSink::new(Vec::new());
        let a = run_simulation(&s.problem, &s.w0, &s.hp, &s.sim, &mut la).map_err(|e| format!("{}: {e}", s.label))?;
        let b = run_pure_async(&s.problem, &s.w0, &s.hp, &s.sim, &mut lb).map_err(|e| format!("{}: {e}", s.label))?;
        check(la.into_inner() == lb.into_inner(), || format!("{}: event logs differ", s.label))?;
        check(records_equal(&a, &b), || format!("{}: trajectories differ", s.label))?;
    }
    Ok(format!("{} scenarios, logs and trajectories byte-equal", scenarios.len()))
}

fn criterion_3() -> Outcome {
    let scenarios = sync_scenarios(10, 1618);
    let mut rounds = 0;
    for s in &scenarios {
        let n = s.problem.n();
        let a = run_simulation(&s.problem, &s.w0, &s.hp, &s.sim, &mut NullSink).map_err(|e| e.to_string())?;
        let b = run_fedavg_sync(&s.problem, &s.w0, &s.hp, &SyncRoundConfig::full(n), s.sim.horizon_t, s.sim.seed, true, &mut NullSink)
            .map_err(|e| e.to_string())?;
        check(records_equal(&a, &b), || format!("{}: per-round models differ", s.label))?;
        rounds += b.trajectory.len() - 1;
    }
    Ok(format!("{} scenarios, {rounds} rounds bitwise equal", scenarios.len()))
}

fn criterion_4(audit: &mut Audit) -> Outcome {
    // Event-driven runs whose tau is the statically validated cap.
    let mut r = rng(4444);
    for i in 0..30 {
        let n = r.random_range(2..7);
        let k = r.random_range(1..=n);
        let delay = if i % 2 == 0 {
            DelayModel::Deterministic {
                download: (0..n).map(|_| r.random_range(0..3) as f64).collect(),
                upload: (0..n).map(|_| r.random_range(1..6) as f64).collect(),
            }
        } else {
            DelayModel::UniformInt { lo: 1, hi: r.random_range(1..5) }
        };
        let tau = event_driven_staleness_bound(&delay, n, k).ok_or("unbounded cap")?;
        let (p, _) = fedbuff::objectives::generate_problem(&ProblemSpec::quadratic(n, 2, 1.0)).map_err(|e| e.to_string())?;
        let hp = HyperParams::new(2, 0.05, 1.0 / k as f64, k, 1);
        let sim = SimConfig::new(ArrivalMode::EventDriven, n, 50, r.random()).with_tau(tau).with_delay(delay);
        let rec = run_simulation(&p, &ParamVector::zeros(2), &hp, &sim, &mut NullSink).map_err(|e| format!("run {i}: {e}"))?;
        audit.observe(rec.audit.max_staleness, tau);
    }
    check(audit.worst_excess <= 0, || format!("staleness exceeded tau by {}", audit.worst_excess))?;

    let (p, _) = fedbuff::objectives::generate_problem(&ProblemSpec::quadratic(2, 2, 1.0)).map_err(|e| e.to_string())?;
    let hp = HyperParams::new(2, 0.05, 0.5, 2, 1);
    let straggler = |tau| {
        let sim = SimConfig::new(ArrivalMode::EventDriven, 2, 12, 5).with_tau(tau).with_delay(DelayModel::Deterministic {
            download: vec![0.0, 0.0],
            upload: vec![1.0, 3.0],
        });
        run_simulation(&p, &ParamVector::zeros(2), &hp, &sim, &mut NullSink)
    };
    let passed = straggler(1).map_err(|e| format!("straggler with tau=1 failed: {e}"))?;
    check(passed.audit.max_staleness == 1, || "straggler should reach staleness 1".into())?;
    match straggler(0) {
        Err(Error::Aborted { source, .. }) if matches!(*source, Error::StalenessViolation { .. }) => {}
        other => return Err(format!("straggler with tau=0 did not abort: {:?}", other.map(|r| r.completed))),
    }
    Ok(format!("{} enforce-mode runs within tau; straggler aborts at tau=0", audit.runs))
}

fn family_problems() -> Vec<(&'static str, ProblemSpec, Problem, ProblemConstants)> {
    let (qs, qp, qc) = quadratic();
    let (ls, lp, lc) = logistic();
    vec![("quadratic", qs, qp, qc), ("logistic", ls, lp, lc)]
}

fn criterion_5() -> Outcome {
    let mut worst_fd = 0.0_f64;
    let mut worst_z = 0.0_f64;
    for (name, _, p, c) in family_problems() {
        let mut r = rng(55);
        for _ in 0..100 {
            let client = r.random_range(0..p.n());
            let w = uniform_point(&mut r, p.dim(), 3.0);
            let exact = p.full_gradient(client, &w).map_err(|e| e.to_string())?;
            let approx = fd_gradient(|x| p.local_objective(client, x).unwrap(), &w, 1e-5);
            let e = rel_err(&approx, exact.as_slice());
            worst_fd = worst_fd.max(e);
            check(e <= 1e-5, || format!("{name}: finite-difference relative error {e:e}"))?;
        }
        let draws = 100_000;
        let b = 2;
        let w = uniform_point(&mut r, p.dim(), 2.0);
        let exact = p.full_gradient(1, &w).map_err(|e| e.to_string())?;
        let mut rs = stream(5, StreamTag::Batch, 1, 0);
        let samples: Vec<ParamVector> = (0..draws)
            .map(|_| p.stochastic_gradient(1, &w, b, &mut rs).unwrap())
            .collect();
        let nf = draws as f64;
        for j in 0..p.dim() {
            let mean = samples.iter().map(|g| g[j]).sum::<f64>() / nf;
            let var = samples.iter().map(|g| (g[j] - mean).powi(2)).sum::<f64>() / (nf - 1.0);
            let z = (mean - exact[j]).abs() / (var / nf).sqrt();
            worst_z = worst_z.max(z);
            check(z <= 3.0, || format!("{name}: coordinate {j} mean off by {z:.2} standard errors"))?;
        }
        let sq: Vec<f64> = samples.iter().map(|g| g.dist_sq(&exact)).collect();
        let v = sq.iter().sum::<f64>() / nf;
        let se = (sq.iter().map(|s| (s - v).powi(2)).sum::<f64>() / (nf - 1.0) / nf).sqrt();
        let cap = c.sigma_sq / b as f64;
        check(v <= cap + 3.0 * se, || format!("{name}: batch variance {v} > sigma^2/b {cap} + 3se"))?;
    }
    Ok(format!("max FD rel err {worst_fd:.1e}; max |bias| {worst_z:.2} se over 1e5 draws"))
}

fn criterion_6() -> Outcome {
    let mut probes = 0;
    for (name, spec, p, c) in family_problems() {
        let mut r = rng(66);
        for _ in 0..10_000 {
            let w = uniform_point(&mut r, p.dim(), 5.0);
            let u = uniform_point(&mut r, p.dim(), 5.0);
            let gap = w.dist_sq(&u).sqrt();
            for client in 0..p.n() {
                let lhs = p
                    .full_gradient(client, &w)
                    .unwrap()
                    .dist_sq(&p.full_gradient(client, &u).unwrap())
                    .sqrt();
                check(lhs <= c.l * gap + 1e-9, || format!("{name}: smoothness fails ({lhs} > {}·{gap})", c.l))?;
            }
        }
        for w in spec.probe_points() {
            let div = p.diversity_at(&w).map_err(|e| e.to_string())?;
            check(div <= c.gamma_sq + 1e-9, || format!("{name}: diversity {div} > gamma^2 {}", c.gamma_sq))?;
            probes += 1;
        }
    }
    Ok(format!("1e4 pairs per family smooth; diversity within gamma^2 at {probes} probes"))
}

fn criterion_7(audit: &mut Audit) -> Outcome {
    let cfg = ExperimentConfig::load(&config_path("rate_sweep.toml"), &[]).map_err(|e| e.to_string())?;
    check(
        cfg.horizons == [128, 256, 512, 1024, 2048] && cfg.seeds.len() == 20,
        || "rate_sweep.toml must sweep T in {128..2048} with 20 seeds".into(),
    )?;
    let bound_cfg = ExperimentConfig::load(&config_path("bound_check.toml"), &[]).map_err(|e| e.to_string())?;
    check(cfg.problem == bound_cfg.problem && cfg.hyper == bound_cfg.hyper, || {
        "rate sweep must use the criterion-1 problem and hyperparameters".into()
    })?;
    let tmp = tempfile::TempDir::new().map_err(|e| e.to_string())?;
    let outcome = run_experiment(&cfg, tmp.path(), 4).map_err(|e| e.to_string())?;
    for c in &outcome.cells {
        audit.observe(c.record.audit.max_staleness, cfg.sim.tau_max);
    }
    let fit = fit_rate_dir(&outcome.dir).map_err(|e| e.to_string())?;
    let detail = format!("slope {:.3} (residual {:.2e}) <= -0.35", fit.slope, fit.residual);
    check(fit.slope <= -0.35, || detail.clone())?;
    Ok(detail)
}

fn criterion_8() -> Outcome {
    let text = std::fs::read_to_string(config_path("logistic_async.toml")).map_err(|e| e.to_string())?;
    let mut files = 0;
    for overrides in [vec![], vec!["sim.mode=uniform_arrival".to_string(), "sim.tau_max=2".to_string()]] {
        let cfg = ExperimentConfig::from_toml_str(&text, &overrides).map_err(|e| e.to_string())?;
        let a = tempfile::TempDir::new().map_err(|e| e.to_string())?;
        let b = tempfile::TempDir::new().map_err(|e| e.to_string())?;
        let ra = run_experiment(&cfg, a.path(), 1).map_err(|e| e.to_string())?;
        let rb = run_experiment(&cfg, b.path(), 3).map_err(|e| e.to_string())?;
        check(ra.manifest == rb.manifest, || "manifests (hashes or fingerprints) differ".into())?;
        for e in &ra.manifest.files {
            let x = std::fs::read(ra.dir.join(&e.path)).map_err(|e| e.to_string())?;
            let y = std::fs::read(rb.dir.join(&e.path)).map_err(|e| e.to_string())?;
            check(x == y, || format!("{} differs between reruns", e.path))?;
            files += 1;
        }
        check(
            ra.manifest.files.iter().any(|e| e.path.ends_with("events.jsonl")),
            || "no event logs were compared".into(),
        )?;
    }
    Ok(format!("{files} artifacts byte-identical across reruns (serial vs parallel)"))
}

fn main() {
    let mut audit = Audit::default();
    let mut failed = 0;
    let criteria: Vec<(&str, Criterion)> = vec![
        ("1 bound validity", Box::new(criterion_1)),
        ("2 K=1 degeneration", Box::new(|_| criterion_2())),
        ("3 synchronous degeneration", Box::new(|_| criterion_3())),
        ("5 gradient oracle", Box::new(|_| criterion_5())),
        ("6 assumption certification", Box::new(|_| criterion_6())),
        ("7 rate shape", Box::new(criterion_7)),
        ("8 determinism", Box::new(|_| criterion_8())),
        ("4 staleness soundness", Box::new(criterion_4)),
    ];
    let mut lines = Vec::new();
    for (name, mut run) in criteria {
        let start = Instant::now();
        let result = run(&mut audit);
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("PASS  criterion {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                format!("FAIL  criterion {name}: {why} [{secs:.1}s]")
            }
        };
        lines.push((name.split(' ').next().unwrap().parse::<u32>().unwrap(), line));
    }
    lines.sort_by_key(|(k, _)| *k);
    for (_, line) in &lines {
        println!("{line}");
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", lines.len());
        std::process::exit(1);
    }
    println!("all {} criteria passed", lines.len());
}
