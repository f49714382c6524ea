use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Result};

/// Affine tracking policy `π(y_s, x, v) = K (x − g_x(y_s)) + v`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffinePolicy {
    pub k: DMatrix<f64>,
}

impl AffinePolicy {
    pub fn new(k: DMatrix<f64>) -> Self {
        Self { k }
    }

    pub fn input_dim(&self) -> usize {
        self.k.nrows()
    }

    pub fn state_dim(&self) -> usize {
        self.k.ncols()
    }

    /// Plant input for state `x`, steady state `x_s` and free input `v`.
    pub fn apply(&self, x: &DVector<f64>, x_s: &DVector<f64>, v: &DVector<f64>) -> DVector<f64> {
        &self.k * (x - x_s) + v
    }

    /// Recovers `v` from a plant input `u`.
    pub fn free_input(&self, u: &DVector<f64>, x: &DVector<f64>, x_s: &DVector<f64>) -> DVector<f64> {
        u - &self.k * (x - x_s)
    }

    /// Elementwise `|K|`.
    pub fn abs_gain(&self) -> DMatrix<f64> {
        self.k.abs()
    }

    pub fn check(&self, n: usize, m: usize) -> Result<()> {
        check_dim("policy gain rows", m, self.k.nrows())?;
        check_dim("policy gain columns", n, self.k.ncols())
    }
}
