use serde::{Deserialize, Serialize};

/// One sample ξ held by a client. For the quadratic family `features` is the
/// point's center and `label` is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataPoint {
    pub features: Vec<f64>,
    pub label: f64,
}

impl DataPoint {
    pub fn new(features: Vec<f64>, label: f64) -> Self {
        DataPoint { features, label }
    }

    /// A quadratic-family point centered at `center`.
    pub fn center(center: Vec<f64>) -> Self {
        DataPoint {
            features: center,
            label: 0.0,
        }
    }
}

/// Per-sample loss ℓ(w, ξ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// `(scale/2)·‖w − x‖²`
    Quadratic { scale: f64 },
    /// `scale·[log(1 + exp(−y⟨x,w⟩)) + λ·Σ_j w_j²/(1 + w_j²)]`
    Logistic { scale: f64, regularizer_weight: f64 },
}

/// `log(1 + exp(-z))` without overflow.
fn softplus_neg(z: f64) -> f64 {
    if z < 0.0 {
        -z + z.exp().ln_1p()
    } else {
        (-z).exp().ln_1p()
    }
}

/// `1 / (1 + exp(z))`, i.e. σ(−z).
fn sigmoid_neg(z: f64) -> f64 {
    if z >= 0.0 {
        let e = (-z).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + z.exp())
    }
}

impl Loss {
    pub fn value(&self, w: &[f64], point: &DataPoint) -> f64 {
        match *self {
            Loss::Quadratic { scale } => {
                let sq: f64 = w
                    .iter()
                    .zip(&point.features)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                0.5 * scale * sq
            }
            Loss::Logistic {
                scale,
                regularizer_weight,
            } => {
                let margin = point.label * dot(&point.features, w);
                let reg: f64 = w.iter().map(|v| v * v / (1.0 + v * v)).sum();
                scale * (softplus_neg(margin) + regularizer_weight * reg)
            }
        }
    }

    /// Add ∇ℓ(w, ξ) into `out`, one coordinate at a time.
    pub fn accumulate_gradient(&self, w: &[f64], point: &DataPoint, out: &mut [f64]) {
        match *self {
            Loss::Quadratic { scale } => {
                for ((o, a), b) in out.iter_mut().zip(w).zip(&point.features) {
                    *o += scale * (a - b);
                }
            }
            Loss::Logistic {
                scale,
                regularizer_weight,
            } => {
                let margin = point.label * dot(&point.features, w);
                let coeff = -point.label * sigmoid_neg(margin);
                for ((o, x), v) in out.iter_mut().zip(&point.features).zip(w) {
                    let denom = 1.0 + v * v;
                    let reg = 2.0 * v / (denom * denom);
                    *o += scale * (coeff * x + regularizer_weight * reg);
                }
            }
        }
    }

    pub fn gradient(&self, w: &[f64], point: &DataPoint) -> Vec<f64> {
        let mut out = vec![0.0; w.len()];
        self.accumulate_gradient(w, point, &mut out);
        out
    }

    pub fn scale(&self) -> f64 {
        match *self {
            Loss::Quadratic { scale } | Loss::Logistic { scale, .. } => scale,
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
