//! Deterministic discrete-event engines driving the FedBuff state machines.
//!
//! Two arrival modes are provided:
//!
//! * [`ArrivalMode::EventDriven`]: every client loops download → `Q` local
//!   steps → upload, with sampled per-leg delays. The snapshot is read when
//!   the download completes. Arrivals emerge from the delays and are in
//!   general not uniform over clients.
//! * [`ArrivalMode::UniformArrival`]: each buffer slot is filled by a client
//!   drawn uniformly from `[n]`, working from a snapshot whose staleness is
//!   uniform on `0..=tau_max` (clamped to the available history).

mod delay;
mod queue;
mod staleness;
mod trace;

use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Problem;
use crate::param::ParamVector;
use crate::protocol::{run_client_round, ClientUpdate, HyperParams, ServerState};
use crate::record::{Algorithm, FlushRecord, MetricRow, RunRecord};
use crate::rng::{stream, RngStream, StreamTag};

pub use delay::{DelayModel, Leg};
pub use queue::{EventKind, EventQueue, SimEvent};
pub use staleness::{
    enforce_staleness, event_driven_staleness_bound, AuditSummary, StalenessAudit, StalenessMode,
    StalenessOutcome, StalenessRecord,
};
pub use trace::{EventSink, JsonlSink, NullSink, TraceEntry, TraceKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArrivalMode {
    EventDriven,
    UniformArrival,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub mode: ArrivalMode,
    pub tau_max: u64,
    pub delay: DelayModel,
    pub horizon_t: u64,
    pub n: usize,
    pub seed: u64,
    #[serde(default)]
    pub staleness: StalenessMode,
    /// Keep every server model in [`RunRecord::trajectory`].
    #[serde(default)]
    pub record_trajectory: bool,
}

impl SimConfig {
    pub fn new(mode: ArrivalMode, n: usize, horizon_t: u64, seed: u64) -> Self {
        SimConfig {
            mode,
            tau_max: 0,
            delay: DelayModel::zero(n),
            horizon_t,
            n,
            seed,
            staleness: StalenessMode::Enforce,
            record_trajectory: false,
        }
    }

    pub fn with_tau(mut self, tau_max: u64) -> Self {
        self.tau_max = tau_max;
        self
    }

    pub fn with_delay(mut self, delay: DelayModel) -> Self {
        self.delay = delay;
        self
    }

    pub fn with_staleness(mut self, mode: StalenessMode) -> Self {
        self.staleness = mode;
        self
    }

    pub fn recording_trajectory(mut self) -> Self {
        self.record_trajectory = true;
        self
    }

    pub fn validate(&self, problem_n: usize) -> Result<()> {
        if self.n < 1 {
            return Err(Error::config("SimConfig.n must be >= 1"));
        }
        if self.n != problem_n {
            return Err(Error::config(format!(
                "SimConfig.n = {} does not match the problem's client count {problem_n}",
                self.n
            )));
        }
        if self.horizon_t < 1 {
            return Err(Error::config("SimConfig.horizon_T must be >= 1"));
        }
        self.delay.validate(self.n)
    }

    /// Explains when the delay caps do not statically guarantee staleness
    /// ≤ `tau_max` in event-driven mode. Such runs still execute; the runtime
    /// audit then decides.
    pub fn staleness_cap_warning(&self, k: usize) -> Option<String> {
        if self.mode != ArrivalMode::EventDriven {
            return None;
        }
        match event_driven_staleness_bound(&self.delay, self.n, k) {
            Some(bound) if bound <= self.tau_max => None,
            Some(bound) => Some(format!(
                "delay caps allow staleness up to {bound} > tau = {}; relying on runtime checks",
                self.tau_max
            )),
            None => Some("delay model admits unbounded staleness; relying on runtime checks".into()),
        }
    }
}

/// Draw i_{t,k} uniformly from `0..n`.
pub fn sample_arrival_uniform(rng: &mut RngStream, n: usize) -> usize {
    rng.random_range(0..n)
}

/// Which client fills the next buffer slot, and how stale its snapshot is.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Arrival {
    pub client: usize,
    pub staleness: u64,
}

pub trait ArrivalSchedule {
    /// `None` ends the run early (reported as a deadlock).
    fn next_arrival(&mut self, server_step: u64) -> Option<Arrival>;
}

/// Arrivals uniform over clients, staleness uniform on `0..=tau_max`.
pub struct UniformSchedule {
    rng: RngStream,
    n: usize,
    tau_max: u64,
}

impl UniformSchedule {
    pub fn new(seed: u64, n: usize, tau_max: u64) -> Self {
        UniformSchedule {
            rng: stream(seed, StreamTag::Arrival, 0, 0),
            n,
            tau_max,
        }
    }
}

impl ArrivalSchedule for UniformSchedule {
    fn next_arrival(&mut self, _server_step: u64) -> Option<Arrival> {
        let client = sample_arrival_uniform(&mut self.rng, self.n);
        let staleness = self.rng.random_range(0..=self.tau_max);
        Some(Arrival { client, staleness })
    }
}

/// A fixed list of arrivals, replayed in order.
pub struct ScriptedSchedule {
    arrivals: std::vec::IntoIter<Arrival>,
}

impl ScriptedSchedule {
    pub fn new(arrivals: Vec<Arrival>) -> Self {
        ScriptedSchedule {
            arrivals: arrivals.into_iter(),
        }
    }

    /// Zero-staleness arrivals for the given client order.
    pub fn fresh(clients: impl IntoIterator<Item = usize>) -> Self {
        ScriptedSchedule::new(
            clients
                .into_iter()
                .map(|client| Arrival { client, staleness: 0 })
                .collect(),
        )
    }
}

impl ArrivalSchedule for ScriptedSchedule {
    fn next_arrival(&mut self, _server_step: u64) -> Option<Arrival> {
        self.arrivals.next()
    }
}

/// Run FedBuff until the server has taken `sim.horizon_t` steps.
pub fn run_simulation(
    problem: &Problem,
    initial_model: &ParamVector,
    hp: &HyperParams,
    sim: &SimConfig,
    sink: &mut dyn EventSink,
) -> Result<RunRecord> {
    match sim.mode {
        ArrivalMode::EventDriven => run_event_driven(problem, initial_model, hp, sim, sink),
        ArrivalMode::UniformArrival => {
            let mut schedule = UniformSchedule::new(sim.seed, sim.n, sim.tau_max);
            run_with_schedule(problem, initial_model, hp, sim, &mut schedule, sink)
        }
    }
}

/// Batch stream of `client`'s `round`-th round.
pub fn client_stream(seed: u64, client: usize, round: u64) -> RngStream {
    stream(seed, StreamTag::Batch, client as u64, round)
}

/// Per-round delay draws: download leg first, then upload.
pub fn sample_round_delays(delay: &DelayModel, seed: u64, client: usize, round: u64) -> (f64, f64) {
    let mut rng = stream(seed, StreamTag::Delay, client as u64, round);
    let down = delay.sample(client, Leg::Download, &mut rng);
    let up = delay.sample(client, Leg::Upload, &mut rng);
    (down, up)
}

/// Wrap runtime failures together with what was recorded before them.
pub(crate) fn abort_with(err: Error, mut partial: RunRecord) -> Error {
    if err.is_runtime_abort() {
        partial.completed = false;
        Error::Aborted {
            source: Box::new(err),
            partial: Box::new(partial),
        }
    } else {
        err
    }
}

/// Shared bookkeeping of an in-progress FedBuff run.
struct RunState<'a> {
    problem: &'a Problem,
    hp: &'a HyperParams,
    sim: &'a SimConfig,
    server: ServerState,
    record: RunRecord,
    rounds: Vec<u64>,
    events: u64,
}

impl<'a> RunState<'a> {
    fn new(
        problem: &'a Problem,
        initial_model: &ParamVector,
        hp: &'a HyperParams,
        sim: &'a SimConfig,
    ) -> Result<Self> {
        hp.validate(problem.n())?;
        sim.validate(problem.n())?;
        initial_model.ensure_dim(problem.dim(), "initial model")?;
        let server = ServerState::new(initial_model.clone())?;
        let mut record = RunRecord::new(Algorithm::FedBuff, sim.horizon_t, initial_model.clone());
        record.rows.push(MetricRow::observe(problem, 0, initial_model, 0, 0, 0)?);
        if sim.record_trajectory {
            record.trajectory.push(initial_model.clone());
        }
        Ok(RunState {
            problem,
            hp,
            sim,
            server,
            record,
            rounds: vec![0; problem.n()],
            events: 0,
        })
    }

    fn done(&self) -> bool {
        self.server.server_step_t >= self.sim.horizon_t
    }

    fn compute_round(&self, client: usize, snapshot: &ParamVector, step: u64) -> Result<ClientUpdate> {
        let mut rng = client_stream(self.sim.seed, client, self.rounds[client]);
        run_client_round(client, snapshot, step, self.hp, self.problem, &mut rng)
    }

    /// Audit and buffer one upload; returns whether it flushed.
    fn deliver(&mut self, update: &ClientUpdate) -> Result<bool> {
        let audit_rec = StalenessRecord::new(
            update.client_id,
            update.download_step,
            self.server.server_step_t,
        )?;
        enforce_staleness(
            &mut self.record.audit,
            audit_rec,
            self.sim.tau_max,
            self.sim.staleness,
        )?;
        let receipt = self.server.receive(update, self.hp)?;
        self.record.uploads += 1;
        let flushed = match receipt.flushed {
            Some(contributors) => {
                self.record.flushes.push(FlushRecord {
                    step: receipt.apply_step,
                    contributors,
                });
                self.record.final_model = self.server.model.clone();
                if self.sim.record_trajectory {
                    self.record.trajectory.push(self.server.model.clone());
                }
                let t = self.server.server_step_t;
                if t < self.sim.horizon_t {
                    self.record.rows.push(MetricRow::observe(
                        self.problem,
                        t,
                        &self.server.model,
                        self.record.audit.max_staleness,
                        self.record.uploads,
                        self.events,
                    )?);
                }
                true
            }
            None => false,
        };
        Ok(flushed)
    }

    fn finish(mut self, sim_time: f64) -> RunRecord {
        self.record.events_processed = self.events;
        self.record.sim_time = sim_time;
        self.record.final_model = self.server.model.clone();
        self.record.completed = true;
        self.record
    }

    fn partial(&self, sim_time: f64) -> RunRecord {
        let mut rec = self.record.clone();
        rec.events_processed = self.events;
        rec.sim_time = sim_time;
        rec.final_model = self.server.model.clone();
        rec
    }
}

fn run_event_driven(
    problem: &Problem,
    initial_model: &ParamVector,
    hp: &HyperParams,
    sim: &SimConfig,
    sink: &mut dyn EventSink,
) -> Result<RunRecord> {
    let mut state = RunState::new(problem, initial_model, hp, sim)?;
    let mut queue = EventQueue::new();
    let mut pending_upload = vec![0.0; problem.n()];
    let mut now = 0.0;

    let request = |queue: &mut EventQueue, pending: &mut [f64], client: usize, round: u64, now: f64| {
        let (down, up) = sample_round_delays(&sim.delay, sim.seed, client, round);
        pending[client] = up;
        queue.push(now + down, EventKind::DownloadComplete { client })
    };
    for client in 0..problem.n() {
        request(&mut queue, &mut pending_upload, client, 0, 0.0)?;
    }

    let outcome: Result<()> = (|| {
        while !state.done() {
            let event = queue.pop().ok_or(Error::Deadlock {
                step: state.server.server_step_t,
                horizon: sim.horizon_t,
            })?;
            now = event.fire_time;
            state.events += 1;
            match event.kind {
                EventKind::DownloadComplete { client } => {
                    let step = state.server.server_step_t;
                    let update = state.compute_round(client, &state.server.model, step)?;
                    sink.record(&TraceEntry {
                        time: now,
                        seq: event.sequence_no,
                        kind: TraceKind::Download,
                        client,
                        step,
                        flushed: None,
                    })?;
                    queue.push(now + pending_upload[client], EventKind::UploadComplete { client, update })?;
                }
                EventKind::UploadComplete { client, update } => {
                    let step = state.server.server_step_t;
                    let flushed = state.deliver(&update)?;
                    sink.record(&TraceEntry {
                        time: now,
                        seq: event.sequence_no,
                        kind: TraceKind::Upload,
                        client,
                        step,
                        flushed: Some(flushed),
                    })?;
                    state.rounds[client] += 1;
                    if !state.done() {
                        request(&mut queue, &mut pending_upload, client, state.rounds[client], now)?;
                    }
                }
            }
        }
        Ok(())
    })();

    match outcome {
        Ok(()) => Ok(state.finish(now)),
        Err(e) => Err(abort_with(e, state.partial(now))),
    }
}

/// Slot-by-slot engine: each arrival is computed from a snapshot `staleness`
/// steps old, taken from a ring buffer of the last `tau_max + 1` models.
pub fn run_with_schedule(
    problem: &Problem,
    initial_model: &ParamVector,
    hp: &HyperParams,
    sim: &SimConfig,
    schedule: &mut dyn ArrivalSchedule,
    sink: &mut dyn EventSink,
) -> Result<RunRecord> {
    let mut state = RunState::new(problem, initial_model, hp, sim)?;
    let capacity = sim.tau_max as usize + 1;
    let mut history: VecDeque<ParamVector> = VecDeque::with_capacity(capacity);
    history.push_back(initial_model.clone());
    let mut arrivals = 0u64;

    let outcome: Result<()> = (|| {
        while !state.done() {
            let t = state.server.server_step_t;
            let arrival = schedule.next_arrival(t).ok_or(Error::Deadlock {
                step: t,
                horizon: sim.horizon_t,
            })?;
            if arrival.client >= problem.n() {
                return Err(Error::contract(format!(
                    "arrival names client {} but n = {}",
                    arrival.client,
                    problem.n()
                )));
            }
            let lag = arrival.staleness.min(t).min(history.len() as u64 - 1);
            let snapshot = &history[history.len() - 1 - lag as usize];
            let update = state.compute_round(arrival.client, snapshot, t - lag)?;
            let time = arrivals as f64;
            state.events += 2;
            sink.record(&TraceEntry {
                time,
                seq: 2 * arrivals,
                kind: TraceKind::Download,
                client: arrival.client,
                step: t - lag,
                flushed: None,
            })?;
            let flushed = state.deliver(&update)?;
            sink.record(&TraceEntry {
                time,
                seq: 2 * arrivals + 1,
                kind: TraceKind::Upload,
                client: arrival.client,
                step: t,
                flushed: Some(flushed),
            })?;
            state.rounds[arrival.client] += 1;
            arrivals += 1;
            if flushed {
                if history.len() == capacity {
                    history.pop_front();
                }
                history.push_back(state.server.model.clone());
            }
        }
        Ok(())
    })();

    let time = arrivals as f64;
    match outcome {
        Ok(()) => Ok(state.finish(time)),
        Err(e) => Err(abort_with(e, state.partial(time))),
    }
}
