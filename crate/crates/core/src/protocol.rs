//! Client and server state machines of buffered asynchronous aggregation.
//!
//! Neither side knows about time. A client downloads a snapshot, takes `Q`
//! local SGD steps and emits the displacement Δ = w_{i,0} − w_{i,Q}. The server
//! sums incoming deltas in arrival order and, once `K` have arrived, applies
//! `w ← w − β·Σ Δ` and advances its step counter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::Problem;
use crate::param::ParamVector;
use crate::rng::RngStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperParams {
    /// Local steps per round.
    pub q: usize,
    /// Local stepsize η.
    pub eta: f64,
    /// Server stepsize β, applied to the raw buffered sum.
    pub beta: f64,
    /// Buffer size.
    pub k: usize,
    pub batch_size: usize,
    /// Use exact local gradients instead of sampled batches.
    #[serde(default)]
    pub full_batch: bool,
}

impl HyperParams {
    pub fn new(q: usize, eta: f64, beta: f64, k: usize, batch_size: usize) -> Self {
        HyperParams {
            q,
            eta,
            beta,
            k,
            batch_size,
            full_batch: false,
        }
    }

    pub fn full_batch(mut self) -> Self {
        self.full_batch = true;
        self
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        if self.q < 1 {
            return Err(Error::config("HyperParams.Q must be >= 1"));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::config(format!(
                "HyperParams.eta must be > 0 (got {})",
                self.eta
            )));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::config(format!(
                "HyperParams.beta must be > 0 (got {})",
                self.beta
            )));
        }
        if self.k < 1 {
            return Err(Error::config("HyperParams.K must be >= 1 (got 0)"));
        }
        if self.batch_size < 1 {
            return Err(Error::config("HyperParams.batch_size must be >= 1"));
        }
        if self.k > n {
            log::warn!("buffer size K = {} exceeds client count n = {n}", self.k);
        }
        Ok(())
    }
}

/// Source of local gradients for the client state machine.
pub trait GradientOracle {
    fn dim(&self) -> usize;

    /// ∇f̃_i(w, D) for a fresh batch, or the exact ∇f_i(w) when `batch` is `None`.
    fn local_gradient(
        &self,
        client: usize,
        w: &ParamVector,
        batch: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<ParamVector>;
}

impl GradientOracle for Problem {
    fn dim(&self) -> usize {
        Problem::dim(self)
    }

    fn local_gradient(
        &self,
        client: usize,
        w: &ParamVector,
        batch: Option<usize>,
        rng: &mut RngStream,
    ) -> Result<ParamVector> {
        match batch {
            Some(b) => self.stochastic_gradient(client, w, b, rng),
            None => self.full_gradient(client, w),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientState {
    pub client_id: usize,
    /// w_{i,0}
    pub snapshot: ParamVector,
    /// w_{i,q}
    pub local_iterate: ParamVector,
    pub local_step_q: usize,
    /// Server step at which the snapshot was taken (τ_i).
    pub download_step: u64,
}

impl ClientState {
    /// Download phase: both the snapshot and the iterate start at the server model.
    pub fn begin_round(client_id: usize, server_model: &ParamVector, server_step: u64) -> Result<Self> {
        server_model.ensure_finite("downloaded server model")?;
        Ok(ClientState {
            client_id,
            snapshot: server_model.clone(),
            local_iterate: server_model.clone(),
            local_step_q: 0,
            download_step: server_step,
        })
    }

    /// One local step `w_{q+1} = w_q − η·∇f̃_i(w_q, D_q)`.
    pub fn local_step<O: GradientOracle + ?Sized>(
        &mut self,
        hp: &HyperParams,
        oracle: &O,
        rng: &mut RngStream,
    ) -> Result<()> {
        if self.local_step_q >= hp.q {
            return Err(Error::contract(format!(
                "client {}: local_step called after all {} local steps",
                self.client_id, hp.q
            )));
        }
        let batch = (!hp.full_batch).then_some(hp.batch_size);
        let grad = oracle.local_gradient(self.client_id, &self.local_iterate, batch, rng)?;
        self.local_iterate.sub_scaled(hp.eta, &grad);
        self.local_iterate.ensure_finite(&format!(
            "client {} local iterate at q = {}",
            self.client_id,
            self.local_step_q + 1
        ))?;
        self.local_step_q += 1;
        Ok(())
    }

    /// Upload phase: Δ = snapshot − iterate.
    pub fn finish_round(&self, hp: &HyperParams) -> Result<ClientUpdate> {
        if self.local_step_q != hp.q {
            return Err(Error::contract(format!(
                "client {}: finish_round after {} of {} local steps",
                self.client_id, self.local_step_q, hp.q
            )));
        }
        let delta = self.snapshot.minus(&self.local_iterate);
        delta.ensure_finite(&format!("client {} delta", self.client_id))?;
        Ok(ClientUpdate {
            client_id: self.client_id,
            delta,
            download_step: self.download_step,
        })
    }
}

/// Runs a whole client round: begin, `Q` local steps, finish.
pub fn run_client_round<O: GradientOracle + ?Sized>(
    client_id: usize,
    server_model: &ParamVector,
    server_step: u64,
    hp: &HyperParams,
    oracle: &O,
    rng: &mut RngStream,
) -> Result<ClientUpdate> {
    let mut state = ClientState::begin_round(client_id, server_model, server_step)?;
    for _ in 0..hp.q {
        state.local_step(hp, oracle, rng)?;
    }
    state.finish_round(hp)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// Δ_i = w_{i,0} − w_{i,Q}
    pub delta: ParamVector,
    pub download_step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contributor {
    pub client_id: usize,
    pub download_step: u64,
}

/// Outcome of one [`ServerState::receive`].
#[derive(Debug, Clone, PartialEq)]
pub struct Receipt {
    /// Server step the update was buffered for (the `t` in i_{t,k}).
    pub apply_step: u64,
    /// Slot index k the update occupied.
    pub slot: usize,
    /// Contributors of the buffer that was just applied, when a flush happened.
    pub flushed: Option<Vec<Contributor>>,
}

impl Receipt {
    pub fn did_flush(&self) -> bool {
        self.flushed.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServerState {
    /// wᵗ
    pub model: ParamVector,
    /// Δ̄ᵗ
    pub accumulator: ParamVector,
    pub buffer_fill_k: usize,
    pub server_step_t: u64,
    pub contributors: Vec<Contributor>,
    pub total_received: u64,
}

impl ServerState {
    pub fn new(initial_model: ParamVector) -> Result<Self> {
        initial_model.ensure_finite("initial server model")?;
        let dim = initial_model.dim();
        Ok(ServerState {
            model: initial_model,
            accumulator: ParamVector::zeros(dim),
            buffer_fill_k: 0,
            server_step_t: 0,
            contributors: Vec::new(),
            total_received: 0,
        })
    }

    /// Buffer one delta; flush atomically when the buffer reaches `K`.
    ///
    /// The first delta of a buffer is copied rather than added to the zero
    /// accumulator, so a one-element buffer holds Δ bit for bit.
    pub fn receive(&mut self, update: &ClientUpdate, hp: &HyperParams) -> Result<Receipt> {
        update.delta.ensure_dim(self.model.dim(), "server_receive")?;
        update
            .delta
            .ensure_finite(&format!("delta from client {}", update.client_id))?;
        let apply_step = self.server_step_t;
        let slot = self.buffer_fill_k;
        if self.buffer_fill_k == 0 {
            self.accumulator = update.delta.clone();
        } else {
            self.accumulator.add_assign(&update.delta);
        }
        self.buffer_fill_k += 1;
        self.total_received += 1;
        self.contributors.push(Contributor {
            client_id: update.client_id,
            download_step: update.download_step,
        });

        let flushed = if self.buffer_fill_k == hp.k {
            self.model.sub_scaled(hp.beta, &self.accumulator);
            self.server_step_t += 1;
            self.accumulator.set_zero();
            self.buffer_fill_k = 0;
            self.model
                .ensure_finite(&format!("server model at step {}", self.server_step_t))?;
            Some(std::mem::take(&mut self.contributors))
        } else {
            None
        };
        Ok(Receipt {
            apply_step,
            slot,
            flushed,
        })
    }
}
