//! Synthetic heterogeneous objectives.
//!
//! Each client's distribution p_i is the empirical distribution over a finite
//! [`ClientDataset`], so f_i, the per-sample variance and the population
//! diversity are all exactly computable.

mod generate;
mod loss;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::ParamVector;
use crate::rng::RngStream;

pub use generate::{generate_problem, probe_points, Family, ProblemSpec};
pub use loss::{DataPoint, Loss};

#[derive(Debug, Clone, PartialEq)]
pub struct ClientDataset {
    pub client_id: usize,
    points: Vec<DataPoint>,
}

impl ClientDataset {
    pub fn new(client_id: usize, points: Vec<DataPoint>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Err(Error::config(format!(
                "ClientDataset {client_id}: dataset must be non-empty"
            )));
        };
        let dim = first.features.len();
        if points.iter().any(|p| p.features.len() != dim) {
            return Err(Error::config(format!(
                "ClientDataset {client_id}: inconsistent feature dimensions"
            )));
        }
        Ok(ClientDataset { client_id, points })
    }

    pub fn points(&self) -> &[DataPoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.points[0].features.len()
    }

    pub fn objective(&self, loss: &Loss, w: &ParamVector) -> f64 {
        let sum: f64 = self.points.iter().map(|p| loss.value(w.as_slice(), p)).sum();
        sum / self.points.len() as f64
    }

    /// Exact mean of the per-sample gradients, summed in sample order.
    pub fn full_gradient(&self, loss: &Loss, w: &ParamVector) -> ParamVector {
        let mut acc = ParamVector::zeros(w.dim());
        for p in &self.points {
            loss.accumulate_gradient(w.as_slice(), p, acc.as_mut_slice());
        }
        acc.div_by(self.points.len() as f64);
        acc
    }

    /// Mean gradient over `batch_size` indices drawn uniformly with replacement.
    pub fn stochastic_gradient(
        &self,
        loss: &Loss,
        w: &ParamVector,
        batch_size: usize,
        rng: &mut RngStream,
    ) -> ParamVector {
        let mut acc = ParamVector::zeros(w.dim());
        for _ in 0..batch_size {
            let idx = rng.random_range(0..self.points.len());
            loss.accumulate_gradient(w.as_slice(), &self.points[idx], acc.as_mut_slice());
        }
        acc.div_by(batch_size as f64);
        acc
    }

    /// Exact per-sample gradient variance `E_ξ‖∇ℓ(w,ξ) − ∇f_i(w)‖²` at `w`.
    pub fn sample_variance(&self, loss: &Loss, w: &ParamVector) -> f64 {
        let mean = self.full_gradient(loss, w);
        let sum: f64 = self
            .points
            .iter()
            .map(|p| ParamVector::from(loss.gradient(w.as_slice(), p)).dist_sq(&mean))
            .sum();
        sum / self.points.len() as f64
    }
}

/// The constants the convergence bound consumes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProblemConstants {
    #[serde(rename = "L")]
    pub l: f64,
    pub sigma_sq: f64,
    pub sigma_hat_sq: f64,
    pub gamma_sq: f64,
    pub f_star: f64,
    pub batch_size_b: usize,
}

impl ProblemConstants {
    pub fn new(l: f64, sigma_sq: f64, gamma_sq: f64, f_star: f64, batch_size_b: usize) -> Self {
        ProblemConstants {
            l,
            sigma_sq,
            sigma_hat_sq: sigma_sq / batch_size_b as f64,
            gamma_sq,
            f_star,
            batch_size_b,
        }
    }

    /// Same constants with σ̂² recomputed for batch size `b`.
    pub fn with_batch_size(self, b: usize) -> Self {
        ProblemConstants::new(self.l, self.sigma_sq, self.gamma_sq, self.f_star, b)
    }
}

/// A loss family together with the n client datasets.
#[derive(Debug, Clone)]
pub struct Problem {
    loss: Loss,
    clients: Vec<ClientDataset>,
    dim: usize,
}

impl Problem {
    pub fn new(loss: Loss, clients: Vec<ClientDataset>) -> Result<Self> {
        if clients.is_empty() {
            return Err(Error::config("ProblemSpec.n must be >= 1"));
        }
        let dim = clients[0].feature_dim();
        for (idx, c) in clients.iter().enumerate() {
            if c.client_id != idx {
                return Err(Error::config(format!(
                    "client at position {idx} carries id {}",
                    c.client_id
                )));
            }
            if c.feature_dim() != dim {
                return Err(Error::config(format!(
                    "client {idx} has feature dimension {} (expected {dim})",
                    c.feature_dim()
                )));
            }
        }
        Ok(Problem { loss, clients, dim })
    }

    pub fn loss(&self) -> &Loss {
        &self.loss
    }

    pub fn n(&self) -> usize {
        self.clients.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn clients(&self) -> &[ClientDataset] {
        &self.clients
    }

    fn client(&self, client: usize) -> Result<&ClientDataset> {
        self.clients.get(client).ok_or_else(|| {
            Error::contract(format!("client {client} out of range (n = {})", self.n()))
        })
    }

    fn check_point(&self, w: &ParamVector, context: &str) -> Result<()> {
        w.ensure_dim(self.dim, context)?;
        w.ensure_finite(context)
    }

    pub fn local_objective(&self, client: usize, w: &ParamVector) -> Result<f64> {
        self.check_point(w, "local_objective")?;
        Ok(self.client(client)?.objective(&self.loss, w))
    }

    pub fn full_gradient(&self, client: usize, w: &ParamVector) -> Result<ParamVector> {
        self.check_point(w, "full_gradient")?;
        Ok(self.client(client)?.full_gradient(&self.loss, w))
    }

    pub fn stochastic_gradient(
        &self,
        client: usize,
        w: &ParamVector,
        batch_size: usize,
        rng: &mut RngStream,
    ) -> Result<ParamVector> {
        self.check_point(w, "stochastic_gradient")?;
        if batch_size == 0 {
            return Err(Error::contract("stochastic_gradient: batch_size must be >= 1"));
        }
        Ok(self
            .client(client)?
            .stochastic_gradient(&self.loss, w, batch_size, rng))
    }

    /// f(w) = (1/n)·Σ f_i(w), summed in client order.
    pub fn global_objective(&self, w: &ParamVector) -> Result<f64> {
        self.check_point(w, "global_objective")?;
        let mut sum = 0.0;
        for c in &self.clients {
            sum += c.objective(&self.loss, w);
        }
        Ok(sum / self.n() as f64)
    }

    /// ∇f(w) = (1/n)·Σ ∇f_i(w), summed in client order.
    pub fn global_gradient(&self, w: &ParamVector) -> Result<ParamVector> {
        self.check_point(w, "global_gradient")?;
        let mut acc = ParamVector::zeros(self.dim);
        for c in &self.clients {
            acc.add_assign(&c.full_gradient(&self.loss, w));
        }
        acc.div_by(self.n() as f64);
        Ok(acc)
    }

    /// (1/n)·Σ‖∇f_i(w) − ∇f(w)‖² at a single point.
    pub fn diversity_at(&self, w: &ParamVector) -> Result<f64> {
        let global = self.global_gradient(w)?;
        let sum: f64 = self
            .clients
            .iter()
            .map(|c| c.full_gradient(&self.loss, w).dist_sq(&global))
            .sum();
        Ok(sum / self.n() as f64)
    }

    /// Maximum of the population diversity over `probes`: a certified lower
    /// bound on γ².
    pub fn measure_diversity(&self, probes: &[ParamVector]) -> Result<f64> {
        if probes.is_empty() {
            return Err(Error::contract("measure_diversity: probe set is empty"));
        }
        let mut best = 0.0_f64;
        for w in probes {
            best = best.max(self.diversity_at(w)?);
        }
        Ok(best)
    }

    /// Maximum over `probes` of the exact per-sample gradient variance of `client`.
    pub fn estimate_variance(&self, client: usize, probes: &[ParamVector]) -> Result<f64> {
        if probes.is_empty() {
            return Err(Error::contract("estimate_variance: probe set is empty"));
        }
        let dataset = self.client(client)?;
        let mut best = 0.0_f64;
        for w in probes {
            self.check_point(w, "estimate_variance")?;
            best = best.max(dataset.sample_variance(&self.loss, w));
        }
        Ok(best)
    }
}
