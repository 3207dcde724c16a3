mod common;

use common::*;
use fedbuff::objectives::{generate_problem, ClientDataset, DataPoint, Loss, Problem, ProblemSpec};
use fedbuff::protocol::HyperParams;
use fedbuff::rng::{stream, StreamTag};
use fedbuff::sim::{
    client_stream, event_driven_staleness_bound, run_simulation, run_with_schedule, ArrivalMode,
    DelayModel, EventKind, EventQueue, JsonlSink, NullSink, ScriptedSchedule, SimConfig,
    StalenessMode, TraceEntry, TraceKind,
};
use fedbuff::{Error, ParamVector};
use proptest::prelude::*;
use rand::Rng;

fn trace_of(problem: &Problem, w0: &ParamVector, hp: &HyperParams, sim: &SimConfig) -> (fedbuff::record::RunRecord, String) {
    let mut sink = JsonlSink::new(Vec::new());
    let rec = run_simulation(problem, w0, hp, sim, &mut sink).unwrap();
    (rec, String::from_utf8(sink.into_inner()).unwrap())
}

fn one_client_quadratic() -> Problem {
    let ds = ClientDataset::new(
        0,
        vec![DataPoint::center(vec![1.0, -2.0]), DataPoint::center(vec![3.0, 0.0])],
    )
    .unwrap();
    Problem::new(Loss::Quadratic { scale: 0.5 }, vec![ds]).unwrap()
}

#[test]
fn single_client_reduces_to_gradient_descent() {
    let p = one_client_quadratic();
    let w0 = ParamVector::from(vec![5.0, 5.0]);
    let hp = HyperParams::new(1, 0.3, 0.7, 1, 1).full_batch();
    for mode in [ArrivalMode::EventDriven, ArrivalMode::UniformArrival] {
        let sim = SimConfig::new(mode, 1, 25, 3).recording_trajectory();
        let rec = run_simulation(&p, &w0, &hp, &sim, &mut NullSink).unwrap();
        assert_eq!(rec.trajectory.len(), 26);
        let mut w = vec![5.0, 5.0];
        for (t, model) in rec.trajectory.iter().enumerate() {
            let err = diff_norm(model.as_slice(), &w);
            assert!(err <= 1e-13 * (1.0 + norm(&w)), "{mode:?} step {t}: {err:e}");
            // Mean of 0.5·(w − x) over the two centers (2, −1).
            let g = [0.5 * (w[0] - 2.0), 0.5 * (w[1] + 1.0)];
            w = vec![w[0] - 0.3 * 0.7 * g[0], w[1] - 0.3 * 0.7 * g[1]];
        }
    }
}

#[test]
fn two_clients_two_slot_buffer_hand_trace() {
    let (p, _) = generate_problem(&ProblemSpec::quadratic(2, 1, 1.0)).unwrap();
    let w0 = ParamVector::from(vec![2.0]);
    let hp = HyperParams::new(1, 0.1, 0.5, 2, 1).full_batch();
    let sim = SimConfig::new(ArrivalMode::EventDriven, 2, 2, 0)
        .with_delay(DelayModel::constant(2, 0.0, 1.0))
        .recording_trajectory();
    let (rec, log) = trace_of(&p, &w0, &hp, &sim);
    let expected = "\
{\"time\":0.0,\"seq\":0,\"kind\":\"download\",\"client\":0,\"step\":0}
{\"time\":0.0,\"seq\":1,\"kind\":\"download\",\"client\":1,\"step\":0}
{\"time\":1.0,\"seq\":2,\"kind\":\"upload\",\"client\":0,\"step\":0,\"flushed\":false}
{\"time\":1.0,\"seq\":3,\"kind\":\"upload\",\"client\":1,\"step\":0,\"flushed\":true}
{\"time\":1.0,\"seq\":4,\"kind\":\"download\",\"client\":0,\"step\":1}
{\"time\":1.0,\"seq\":5,\"kind\":\"download\",\"client\":1,\"step\":1}
{\"time\":2.0,\"seq\":6,\"kind\":\"upload\",\"client\":0,\"step\":1,\"flushed\":false}
{\"time\":2.0,\"seq\":7,\"kind\":\"upload\",\"client\":1,\"step\":1,\"flushed\":true}
";
    assert_eq!(log, expected);
    assert_eq!(rec.audit.max_staleness, 0);
    assert_eq!(rec.flushes.len(), 2);
    assert!(rec.flushes.iter().all(|f| f.contributors.len() == 2));

    // One flush per round: w ← w − β·η·(∇f₀(w) + ∇f₁(w)) = w − η·∇f(w) for β = 1/2.
    let mut w = 2.0;
    for model in &rec.trajectory {
        assert!((model[0] - w).abs() < 1e-14);
        let g = p.global_gradient(&ParamVector::from(vec![w])).unwrap()[0];
        w -= 0.1 * g;
    }
}

#[test]
fn five_clients_buffer_of_two_alternates_buffered_and_flushing_uploads() {
    let (p, _) = generate_problem(&ProblemSpec::quadratic(5, 2, 1.0)).unwrap();
    let hp = HyperParams::new(3, 0.05, 0.5, 2, 1);
    let sim = SimConfig::new(ArrivalMode::EventDriven, 5, 20, 8)
        .with_tau(10)
        .with_delay(DelayModel::Deterministic {
            download: vec![0.5, 0.0, 1.0, 0.25, 0.0],
            upload: vec![1.0, 2.0, 3.0, 4.0, 5.0],
        });
    let (rec, log) = trace_of(&p, &ParamVector::zeros(2), &hp, &sim);
    let entries: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let flushed: Vec<bool> = entries
        .iter()
        .filter(|e| e["kind"] == "upload")
        .map(|e| e["flushed"].as_bool().unwrap())
        .collect();
    assert_eq!(flushed.len() as u64, rec.uploads);
    for (i, f) in flushed.iter().enumerate() {
        assert_eq!(*f, i % 2 == 1, "upload {i}");
    }
    assert_eq!(rec.flushes.len() as u64, rec.uploads / 2);
    assert_eq!(rec.rows.len(), 20);
    assert!(entries.iter().filter(|e| e["kind"] == "download").all(|e| e.get("flushed").is_none()));
}

fn straggler(tau: u64) -> Result<fedbuff::record::RunRecord, Error> {
    let (p, _) = generate_problem(&ProblemSpec::quadratic(2, 2, 1.0)).unwrap();
    let hp = HyperParams::new(2, 0.05, 0.5, 2, 1);
    let sim = SimConfig::new(ArrivalMode::EventDriven, 2, 12, 5)
        .with_tau(tau)
        .with_delay(DelayModel::Deterministic {
            download: vec![0.0, 0.0],
            upload: vec![1.0, 3.0],
        });
    run_simulation(&p, &ParamVector::zeros(2), &hp, &sim, &mut NullSink)
}

#[test]
fn straggler_passes_with_tau_one_and_aborts_with_tau_zero() {
    let ok = straggler(1).unwrap();
    assert_eq!(ok.audit.max_staleness, 1);
    assert!(ok.completed);
    match straggler(0).unwrap_err() {
        Error::Aborted { source, partial } => {
            assert!(matches!(*source, Error::StalenessViolation { tau_max: 0, .. }));
            assert!(!partial.completed);
            assert!(!partial.rows.is_empty());
        }
        other => panic!("expected an abort, got {other}"),
    }
}

#[test]
fn observe_mode_records_violations_without_aborting() {
    let (p, _) = generate_problem(&ProblemSpec::quadratic(2, 2, 1.0)).unwrap();
    let hp = HyperParams::new(2, 0.05, 0.5, 2, 1);
    let sim = SimConfig::new(ArrivalMode::EventDriven, 2, 12, 5)
        .with_staleness(StalenessMode::Observe)
        .with_delay(DelayModel::Deterministic {
            download: vec![0.0, 0.0],
            upload: vec![1.0, 3.0],
        });
    let rec = run_simulation(&p, &ParamVector::zeros(2), &hp, &sim, &mut NullSink).unwrap();
    assert!(rec.completed);
    assert!(rec.audit.violations > 0);
    let max = rec.audit.records.iter().map(|r| r.staleness).max().unwrap();
    assert_eq!(rec.audit.max_staleness, max);
}

#[test]
fn zero_delay_staleness() {
    let (p, _) = generate_problem(&ProblemSpec::quadratic(4, 3, 1.0)).unwrap();
    for k in 1..=4 {
        let hp = HyperParams::new(2, 0.05, 1.0 / k as f64, k, 2);
        let delay = DelayModel::zero(4);
        let bound = event_driven_staleness_bound(&delay, 4, k).unwrap();
        let sim = SimConfig::new(ArrivalMode::EventDriven, 4, 30, 1)
            .with_tau(bound)
            .with_delay(delay);
        let rec = run_simulation(&p, &ParamVector::zeros(3), &hp, &sim, &mut NullSink).unwrap();
        if k == 4 {
            // Every round's downloads share one snapshot and one flush.
            assert_eq!(rec.audit.max_staleness, 0);
        } else {
            // Simultaneous downloads spill over ⌈n/K⌉ flushes.
            assert!(rec.audit.max_staleness > 0 && rec.audit.max_staleness <= bound, "K = {k}");
        }
    }
}

#[test]
fn uniform_mode_respects_tau_and_cadence() {
    let (p, _) = generate_problem(&ProblemSpec::quadratic(5, 3, 1.0)).unwrap();
    let hp = HyperParams::new(2, 0.05, 1.0 / 3.0, 3, 2);
    for tau in [0, 1, 4] {
        let sim = SimConfig::new(ArrivalMode::UniformArrival, 5, 60, 12).with_tau(tau);
        let rec = run_simulation(&p, &ParamVector::zeros(3), &hp, &sim, &mut NullSink).unwrap();
        assert!(rec.audit.max_staleness <= tau);
        assert_eq!(rec.uploads, 60 * 3);
        assert_eq!(rec.flushes.len(), 60);
        assert_eq!(rec.rows.len(), 60);
        if tau > 0 {
            assert_eq!(rec.audit.max_staleness, tau, "staleness should reach tau = {tau}");
        }
    }
}

#[test]
fn queue_pops_in_sorted_order() {
    let mut r = rng(1000);
    let mut q = EventQueue::new();
    let mut pushed = Vec::new();
    for _ in 0..1000 {
        let time = r.random_range(0..50) as f64 * 0.5;
        let client = r.random_range(0..8);
        let seq = q.push(time, EventKind::DownloadComplete { client }).unwrap();
        pushed.push((time, seq));
    }
    pushed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let popped: Vec<(f64, u64)> = std::iter::from_fn(|| q.pop())
        .map(|e| (e.fire_time, e.sequence_no))
        .collect();
    assert_eq!(popped, pushed);
    assert!(q.next_event().is_err());
}

#[test]
fn reruns_are_bitwise_identical() {
    let (p, _) = generate_problem(&ProblemSpec::logistic(6, 3, 0.1)).unwrap();
    let hp = HyperParams::new(3, 0.1, 0.25, 4, 2);
    for mode in [ArrivalMode::EventDriven, ArrivalMode::UniformArrival] {
        let sim = SimConfig::new(mode, 6, 40, 99)
            .with_tau(3)
            .with_staleness(StalenessMode::Observe)
            .with_delay(DelayModel::UniformInt { lo: 0, hi: 3 })
            .recording_trajectory();
        let (a, la) = trace_of(&p, &ParamVector::zeros(3), &hp, &sim);
        let (b, lb) = trace_of(&p, &ParamVector::zeros(3), &hp, &sim);
        assert_eq!(la, lb);
        assert_eq!(a.final_checksum(), b.final_checksum());
        assert!(a.trajectory.iter().zip(&b.trajectory).all(|(x, y)| x.bits_eq(y)));
        let mut ca = Vec::new();
        let mut cb = Vec::new();
        a.write_csv(&mut ca).unwrap();
        b.write_csv(&mut cb).unwrap();
        assert_eq!(ca, cb);
    }
}

/// Local SGD for the quadratic family, re-implemented from the definitions
/// and fed the same keyed substream as the simulator.
#[allow(clippy::too_many_arguments)]
fn replay_round(points: &[DataPoint], scale: f64, w: &[f64], q: usize, eta: f64, b: usize, seed: u64, client: usize, round: u64) -> Vec<f64> {
    let mut r = stream(seed, StreamTag::Batch, client as u64, round);
    let mut x = w.to_vec();
    for _ in 0..q {
        let mut g = vec![0.0; x.len()];
        for _ in 0..b {
            let idx = r.random_range(0..points.len());
            for j in 0..x.len() {
                g[j] += scale * (x[j] - points[idx].features[j]);
            }
        }
        for (xj, gj) in x.iter_mut().zip(&g) {
            *xj -= eta * (gj / b as f64);
        }
    }
    w.iter().zip(&x).map(|(a, b)| a - b).collect()
}

#[test]
fn client_rounds_replay_bitwise_from_keyed_streams() {
    let spec = ProblemSpec {
        seed: 3,
        ..ProblemSpec::quadratic(3, 3, 0.8)
    };
    let (p, _) = generate_problem(&spec).unwrap();
    let hp = HyperParams::new(4, 0.07, 1.0, 1, 3);
    let sim = SimConfig::new(ArrivalMode::UniformArrival, 3, 30, 55).recording_trajectory();
    let mut log = Vec::<TraceEntry>::new();
    let rec = run_with_schedule(
        &p,
        &ParamVector::zeros(3),
        &hp,
        &sim,
        &mut ScriptedSchedule::fresh((0..30).map(|i| (i * 7 + 1) % 3)),
        &mut log,
    )
    .unwrap();
    let mut rounds = [0u64; 3];
    let uploads: Vec<&TraceEntry> = log.iter().filter(|e| e.kind == TraceKind::Upload).collect();
    for (t, e) in uploads.iter().enumerate() {
        let w = rec.trajectory[t].as_slice();
        let delta = replay_round(p.clients()[e.client].points(), 0.8, w, 4, 0.07, 3, 55, e.client, rounds[e.client]);
        rounds[e.client] += 1;
        let mut next = w.to_vec();
        for (a, d) in next.iter_mut().zip(&delta) {
            *a -= 1.0 * d;
        }
        assert!(ParamVector::from(next).bits_eq(&rec.trajectory[t + 1]), "step {t}");
    }
    let _ = client_stream(55, 0, 0);
}

#[test]
fn scripted_zero_delay_matches_event_driven_when_buffer_holds_all_clients() {
    let (p, _) = generate_problem(&ProblemSpec::logistic(4, 2, 0.2)).unwrap();
    let hp = HyperParams::new(2, 0.1, 0.25, 4, 2);
    let ev = SimConfig::new(ArrivalMode::EventDriven, 4, 10, 21).recording_trajectory();
    let a = run_simulation(&p, &ParamVector::zeros(2), &hp, &ev, &mut NullSink).unwrap();
    let ua = SimConfig::new(ArrivalMode::UniformArrival, 4, 10, 21).recording_trajectory();
    let b = run_with_schedule(
        &p,
        &ParamVector::zeros(2),
        &hp,
        &ua,
        &mut ScriptedSchedule::fresh((0..40).map(|i| i % 4)),
        &mut NullSink,
    )
    .unwrap();
    assert_eq!(a.flushes, b.flushes);
    assert!(a.trajectory.iter().zip(&b.trajectory).all(|(x, y)| x.bits_eq(y)));
}

#[test]
fn nan_in_model_aborts_with_partial_record() {
    let p = one_client_quadratic();
    let hp = HyperParams::new(1, 1e308, 1e308, 1, 1).full_batch();
    let sim = SimConfig::new(ArrivalMode::EventDriven, 1, 10, 0);
    let err = run_simulation(&p, &ParamVector::from(vec![1e300, 1e300]), &hp, &sim, &mut NullSink).unwrap_err();
    assert!(matches!(err.root(), Error::NonFinite { .. }), "{err}");
}

fn delay_strategy() -> impl Strategy<Value = (usize, usize, DelayModel)> {
    (1usize..6).prop_flat_map(|n| {
        let det = (
            proptest::collection::vec(0u32..4, n),
            proptest::collection::vec(1u32..6, n),
        )
            .prop_map(|(d, u)| DelayModel::Deterministic {
                download: d.into_iter().map(f64::from).collect(),
                upload: u.into_iter().map(f64::from).collect(),
            });
        let uni = (1u64..3, 0u64..4).prop_map(|(lo, extra)| DelayModel::UniformInt { lo, hi: lo + extra });
        (Just(n), 1..=n, prop_oneof![det, uni])
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn static_bound_covers_observed_staleness((n, k, delay) in delay_strategy(), seed in 0u64..1000) {
        let bound = event_driven_staleness_bound(&delay, n, k).expect("positive round trips give a finite bound");
        let (p, _) = generate_problem(&ProblemSpec::quadratic(n, 2, 1.0)).unwrap();
        let hp = HyperParams::new(1, 0.05, 1.0 / k as f64, k, 1);
        let sim = SimConfig::new(ArrivalMode::EventDriven, n, 40, seed)
            .with_tau(bound)
            .with_delay(delay);
        let rec = run_simulation(&p, &ParamVector::zeros(2), &hp, &sim, &mut NullSink);
        prop_assert!(rec.is_ok(), "{:?}", rec.err());
        let rec = rec.unwrap();
        prop_assert!(rec.audit.max_staleness <= bound);
        prop_assert_eq!(rec.flushes.len() as u64, rec.uploads / k as u64);
    }
}
