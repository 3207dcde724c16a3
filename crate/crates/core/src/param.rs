use std::fmt;
use std::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// A d-dimensional model parameter.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn zeros(dim: usize) -> Self {
        ParamVector(vec![0.0; dim])
    }

    pub fn filled(dim: usize, value: f64) -> Self {
        ParamVector(vec![value; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.0.iter()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::non_finite(context))
        }
    }

    pub fn ensure_dim(&self, dim: usize, context: &str) -> Result<()> {
        if self.dim() == dim {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "{context}: dimension {} does not match expected {dim}",
                self.dim()
            )))
        }
    }

    pub fn norm_sq(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum()
    }

    pub fn dot(&self, other: &ParamVector) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }

    /// Squared Euclidean distance.
    pub fn dist_sq(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    }

    /// `self += other`, coordinate by coordinate.
    pub fn add_assign(&mut self, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += b;
        }
    }

    /// `self -= scale * other`, evaluated as `a - scale * b` per coordinate.
    pub fn sub_scaled(&mut self, scale: f64, other: &ParamVector) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a -= scale * b;
        }
    }

    pub fn scale_by(&mut self, factor: f64) {
        for a in &mut self.0 {
            *a *= factor;
        }
    }

    /// Divide every coordinate by `denom`.
    pub fn div_by(&mut self, denom: f64) {
        for a in &mut self.0 {
            *a /= denom;
        }
    }

    /// Elementwise `self - other`.
    pub fn minus(&self, other: &ParamVector) -> ParamVector {
        ParamVector(self.0.iter().zip(&other.0).map(|(a, b)| a - b).collect())
    }

    pub fn set_zero(&mut self) {
        self.0.iter_mut().for_each(|a| *a = 0.0);
    }

    /// SHA-256 over the little-endian bit patterns of the coordinates.
    pub fn checksum(&self) -> String {
        let mut hasher = Sha256::new();
        for v in &self.0 {
            hasher.update(v.to_bits().to_le_bytes());
        }
        hex::encode(hasher.finalize())
    }

    /// Bitwise equality (distinguishes `0.0` from `-0.0`, equates identical NaNs).
    pub fn bits_eq(&self, other: &ParamVector) -> bool {
        self.dim() == other.dim()
            && self
                .0
                .iter()
                .zip(&other.0)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl Index<usize> for ParamVector {
    type Output = f64;

    fn index(&self, idx: usize) -> &f64 {
        &self.0[idx]
    }
}

impl IndexMut<usize> for ParamVector {
    fn index_mut(&mut self, idx: usize) -> &mut f64 {
        &mut self.0[idx]
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}
