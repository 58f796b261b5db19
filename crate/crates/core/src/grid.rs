use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Uniform partition of `[0, T]` into `steps` intervals.
///
/// Coefficient tables are piecewise constant on `[t_i, t_{i+1})`, sampled at
/// the left endpoint; node `i` sits at `i * dt`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Input(format!(
                "horizon must be a positive real, got {horizon}"
            )));
        }
        if steps < 2 {
            return Err(Error::Input(format!("steps must be >= 2, got {steps}")));
        }
        Ok(Self { horizon, steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid nodes, `steps + 1`.
    pub fn nodes(&self) -> usize {
        self.steps + 1
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    /// Node time `t_i = i * dt`.
    pub fn node(&self, i: usize) -> f64 {
        debug_assert!(i <= self.steps);
        i as f64 * self.dt()
    }
}
