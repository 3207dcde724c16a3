//! Deterministic discrete-event simulator and analysis toolkit for buffered
//! asynchronous federated learning (FedBuff).
//!
//! The crate is organised bottom-up:
//!
//! * [`objectives`]: synthetic heterogeneous objectives with exact gradients and
//!   the constants (L, σ², γ², f*) the convergence bound consumes.
//! * [`protocol`]: the client and server state machines, independent of timing.
//! * [`sim`]: the event-driven and uniform-arrival engines that drive them.
//! * [`baselines`]: synchronous FedAvg and unbuffered asynchronous FL, used as
//!   trace-equivalence oracles.
//! * [`analysis`]: bound evaluation, stepsize schedule, multi-seed aggregation
//!   and rate fitting.
//! * [`harness`]: configuration, experiment orchestration and artifacts.

pub mod analysis;
pub mod baselines;
pub mod error;
pub mod harness;
pub mod objectives;
pub mod param;
pub mod protocol;
pub mod record;
pub mod rng;
pub mod sim;

pub use error::{Error, Result};
pub use param::ParamVector;
