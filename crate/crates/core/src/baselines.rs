//! Reference algorithms used as oracles for the buffered server.
//!
//! [`run_pure_async`] applies every upload immediately (vanilla asynchronous
//! FL) and [`run_fedavg_sync`] runs barrier-synchronised rounds. Both reuse the
//! client state machine and the keyed RNG streams, so with matching schedules
//! they must reproduce FedBuff with `K = 1` and `K = n` bit for bit.

use std::collections::VecDeque;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Problem;
use crate::param::ParamVector;
use crate::protocol::{run_client_round, ClientUpdate, Contributor, HyperParams};
use crate::record::{Algorithm, FlushRecord, MetricRow, RunRecord};
use crate::rng::{stream, StreamTag};
use crate::sim::{
    abort_with, client_stream, enforce_staleness, sample_round_delays, ArrivalMode,
    ArrivalSchedule, EventKind, EventQueue, EventSink, SimConfig, StalenessRecord, TraceEntry,
    TraceKind, UniformSchedule,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyncRoundConfig {
    pub clients_per_round: usize,
    /// Server stepsize applied to the summed deltas.
    pub aggregation_weight: f64,
}

impl SyncRoundConfig {
    pub fn full(n: usize) -> Self {
        SyncRoundConfig {
            clients_per_round: n,
            aggregation_weight: 1.0 / n as f64,
        }
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.clients_per_round < 1 || self.clients_per_round > n {
            return Err(Error::config(format!(
                "SyncRoundConfig.clients_per_round must be in [1, {n}] (got {})",
                self.clients_per_round
            )));
        }
        if !(self.aggregation_weight > 0.0 && self.aggregation_weight.is_finite()) {
            return Err(Error::config("SyncRoundConfig.aggregation_weight must be > 0"));
        }
        Ok(())
    }
}

/// Unbuffered server: `w ← w − β·Δ` on every upload.
struct AsyncServer<'a> {
    problem: &'a Problem,
    hp: &'a HyperParams,
    sim: &'a SimConfig,
    model: ParamVector,
    step: u64,
    record: RunRecord,
    rounds: Vec<u64>,
    events: u64,
}

impl<'a> AsyncServer<'a> {
    fn new(problem: &'a Problem, w0: &ParamVector, hp: &'a HyperParams, sim: &'a SimConfig) -> Result<Self> {
        hp.validate(problem.n())?;
        sim.validate(problem.n())?;
        w0.ensure_dim(problem.dim(), "initial model")?;
        w0.ensure_finite("initial model")?;
        let mut record = RunRecord::new(Algorithm::PureAsync, sim.horizon_t, w0.clone());
        record.rows.push(MetricRow::observe(problem, 0, w0, 0, 0, 0)?);
        if sim.record_trajectory {
            record.trajectory.push(w0.clone());
        }
        Ok(AsyncServer {
            problem,
            hp,
            sim,
            model: w0.clone(),
            step: 0,
            record,
            rounds: vec![0; problem.n()],
            events: 0,
        })
    }

    fn done(&self) -> bool {
        self.step >= self.sim.horizon_t
    }

    fn compute(&self, client: usize, snapshot: &ParamVector, step: u64) -> Result<ClientUpdate> {
        let mut rng = client_stream(self.sim.seed, client, self.rounds[client]);
        run_client_round(client, snapshot, step, self.hp, self.problem, &mut rng)
    }

    fn apply(&mut self, update: &ClientUpdate) -> Result<()> {
        let rec = StalenessRecord::new(update.client_id, update.download_step, self.step)?;
        enforce_staleness(&mut self.record.audit, rec, self.sim.tau_max, self.sim.staleness)?;
        update.delta.ensure_finite("pure-async delta")?;
        for (w, d) in self.model.as_mut_slice().iter_mut().zip(update.delta.iter()) {
            *w -= self.hp.beta * d;
        }
        self.model.ensure_finite("pure-async server model")?;
        self.record.uploads += 1;
        self.record.flushes.push(FlushRecord {
            step: self.step,
            contributors: vec![Contributor {
                client_id: update.client_id,
                download_step: update.download_step,
            }],
        });
        self.step += 1;
        if self.sim.record_trajectory {
            self.record.trajectory.push(self.model.clone());
        }
        if self.step < self.sim.horizon_t {
            self.record.rows.push(MetricRow::observe(
                self.problem,
                self.step,
                &self.model,
                self.record.audit.max_staleness,
                self.record.uploads,
                self.events,
            )?);
        }
        Ok(())
    }

    fn snapshot_record(&self, sim_time: f64, completed: bool) -> RunRecord {
        let mut rec = self.record.clone();
        rec.final_model = self.model.clone();
        rec.events_processed = self.events;
        rec.sim_time = sim_time;
        rec.completed = completed;
        rec
    }
}

/// Vanilla asynchronous FL under the same event semantics as the simulator.
/// `hp.k` is ignored.
pub fn run_pure_async(
    problem: &Problem,
    initial_model: &ParamVector,
    hp: &HyperParams,
    sim: &SimConfig,
    sink: &mut dyn EventSink,
) -> Result<RunRecord> {
    let mut server = AsyncServer::new(problem, initial_model, hp, sim)?;
    let mut now = 0.0;
    let outcome = match sim.mode {
        ArrivalMode::EventDriven => async_event_loop(&mut server, sink, &mut now),
        ArrivalMode::UniformArrival => async_uniform_loop(&mut server, sink, &mut now),
    };
    match outcome {
        Ok(()) => Ok(server.snapshot_record(now, true)),
        Err(e) => Err(abort_with(e, server.snapshot_record(now, false))),
    }
}

fn async_event_loop(server: &mut AsyncServer<'_>, sink: &mut dyn EventSink, now: &mut f64) -> Result<()> {
    let sim = server.sim;
    let n = server.problem.n();
    let mut queue = EventQueue::new();
    let mut upload_delay = vec![0.0; n];
    for (client, slot) in upload_delay.iter_mut().enumerate() {
        let (down, up) = sample_round_delays(&sim.delay, sim.seed, client, 0);
        *slot = up;
        queue.push(down, EventKind::DownloadComplete { client })?;
    }
    while !server.done() {
        let event = queue.pop().ok_or(Error::Deadlock {
            step: server.step,
            horizon: sim.horizon_t,
        })?;
        *now = event.fire_time;
        server.events += 1;
        match event.kind {
            EventKind::DownloadComplete { client } => {
                let update = server.compute(client, &server.model, server.step)?;
                sink.record(&TraceEntry {
                    time: *now,
                    seq: event.sequence_no,
                    kind: TraceKind::Download,
                    client,
                    step: server.step,
                    flushed: None,
                })?;
                queue.push(*now + upload_delay[client], EventKind::UploadComplete { client, update })?;
            }
            EventKind::UploadComplete { client, update } => {
                let step = server.step;
                server.apply(&update)?;
                sink.record(&TraceEntry {
                    time: *now,
                    seq: event.sequence_no,
                    kind: TraceKind::Upload,
                    client,
                    step,
                    flushed: Some(true),
                })?;
                server.rounds[client] += 1;
                if !server.done() {
                    let (down, up) =
                        sample_round_delays(&sim.delay, sim.seed, client, server.rounds[client]);
                    upload_delay[client] = up;
                    queue.push(*now + down, EventKind::DownloadComplete { client })?;
                }
            }
        }
    }
    Ok(())
}

fn async_uniform_loop(server: &mut AsyncServer<'_>, sink: &mut dyn EventSink, now: &mut f64) -> Result<()> {
    let sim = server.sim;
    let mut schedule = UniformSchedule::new(sim.seed, sim.n, sim.tau_max);
    let capacity = sim.tau_max as usize + 1;
    let mut history = VecDeque::from([server.model.clone()]);
    let mut arrivals = 0u64;
    while !server.done() {
        let arrival = schedule.next_arrival(server.step).ok_or(Error::Deadlock {
            step: server.step,
            horizon: sim.horizon_t,
        })?;
        let t = server.step;
        let lag = arrival.staleness.min(t).min(history.len() as u64 - 1);
        let snapshot = history[history.len() - 1 - lag as usize].clone();
        let update = server.compute(arrival.client, &snapshot, t - lag)?;
        server.events += 2;
        *now = arrivals as f64;
        sink.record(&TraceEntry {
            time: *now,
            seq: 2 * arrivals,
            kind: TraceKind::Download,
            client: arrival.client,
            step: t - lag,
            flushed: None,
        })?;
        server.apply(&update)?;
        sink.record(&TraceEntry {
            time: *now,
            seq: 2 * arrivals + 1,
            kind: TraceKind::Upload,
            client: arrival.client,
            step: t,
            flushed: Some(true),
        })?;
        server.rounds[arrival.client] += 1;
        arrivals += 1;
        if history.len() == capacity {
            history.pop_front();
        }
        history.push_back(server.model.clone());
    }
    *now = arrivals as f64;
    Ok(())
}

/// Synchronous rounds: sample `clients_per_round` clients without replacement,
/// run them from the same snapshot, then apply `w ← w − weight·ΣΔ` with the
/// deltas summed in increasing client id.
#[allow(clippy::too_many_arguments)]
pub fn run_fedavg_sync(
    problem: &Problem,
    initial_model: &ParamVector,
    hp: &HyperParams,
    cfg: &SyncRoundConfig,
    rounds: u64,
    seed: u64,
    record_trajectory: bool,
    sink: &mut dyn EventSink,
) -> Result<RunRecord> {
    let n = problem.n();
    cfg.validate(n)?;
    hp.validate(n)?;
    if rounds < 1 {
        return Err(Error::config("SimConfig.horizon_T must be >= 1"));
    }
    initial_model.ensure_dim(problem.dim(), "initial model")?;
    initial_model.ensure_finite("initial model")?;

    let mut record = RunRecord::new(Algorithm::FedAvgSync, rounds, initial_model.clone());
    record.rows.push(MetricRow::observe(problem, 0, initial_model, 0, 0, 0)?);
    if record_trajectory {
        record.trajectory.push(initial_model.clone());
    }
    let mut model = initial_model.clone();
    let mut client_rounds = vec![0u64; n];
    let mut seq = 0u64;

    for round in 0..rounds {
        let mut selected: Vec<usize> = if cfg.clients_per_round == n {
            (0..n).collect()
        } else {
            let mut rng = stream(seed, StreamTag::Sampling, round, 0);
            index::sample(&mut rng, n, cfg.clients_per_round).into_vec()
        };
        selected.sort_unstable();

        let result: Result<()> = (|| {
            let mut sum: Option<ParamVector> = None;
            for &client in &selected {
                let mut rng = client_stream(seed, client, client_rounds[client]);
                let update = run_client_round(client, &model, round, hp, problem, &mut rng)?;
                client_rounds[client] += 1;
                sink.record(&TraceEntry {
                    time: round as f64,
                    seq,
                    kind: TraceKind::Download,
                    client,
                    step: round,
                    flushed: None,
                })?;
                seq += 1;
                match sum.as_mut() {
                    None => sum = Some(update.delta.clone()),
                    Some(s) => s.add_assign(&update.delta),
                }
                let rec = StalenessRecord::new(client, round, round)?;
                record.audit.records.push(rec);
            }
            let sum = sum.expect("at least one client per round");
            for (w, s) in model.as_mut_slice().iter_mut().zip(sum.iter()) {
                *w -= cfg.aggregation_weight * s;
            }
            model.ensure_finite(&format!("FedAvg model after round {round}"))?;
            for (pos, &client) in selected.iter().enumerate() {
                sink.record(&TraceEntry {
                    time: round as f64,
                    seq,
                    kind: TraceKind::Upload,
                    client,
                    step: round,
                    flushed: Some(pos + 1 == selected.len()),
                })?;
                seq += 1;
            }
            Ok(())
        })();
        if let Err(e) = result {
            record.final_model = model.clone();
            return Err(abort_with(e, record));
        }

        record.uploads += selected.len() as u64;
        record.events_processed = seq;
        record.flushes.push(FlushRecord {
            step: round,
            contributors: selected
                .iter()
                .map(|&client_id| Contributor {
                    client_id,
                    download_step: round,
                })
                .collect(),
        });
        if record_trajectory {
            record.trajectory.push(model.clone());
        }
        if round + 1 < rounds {
            record.rows.push(MetricRow::observe(
                problem,
                round + 1,
                &model,
                0,
                record.uploads,
                seq,
            )?);
        }
    }
    record.final_model = model;
    record.sim_time = rounds as f64;
    record.completed = true;
    Ok(record)
}
