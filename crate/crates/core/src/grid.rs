//! Uniform time and belief grids, and grid functions on time x belief.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Uniform time grid `t_n = n dt`, `n = 0..=n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub dt: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(dt: f64, n_steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::InvalidInput(format!("time step must be positive, got {dt}")));
        }
        Ok(Self { dt, n_steps })
    }

    /// Grid covering `[0, horizon]` with step at most `dt_max`.
    pub fn covering(horizon: f64, dt_max: f64) -> Result<Self> {
        if !(horizon >= 0.0) || !(dt_max > 0.0) {
            return Err(Error::InvalidInput(format!("bad horizon {horizon} or step {dt_max}")));
        }
        if horizon == 0.0 {
            return Self::new(dt_max, 0);
        }
        let n = (horizon / dt_max - 1e-9).ceil().max(1.0) as usize;
        Self::new(horizon / n as f64, n)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_steps + 1
    }

    pub fn horizon(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn t(&self, n: usize) -> f64 {
        self.dt * n as f64
    }

    /// Index of the grid interval containing `t`, clamped to the last interval.
    pub fn interval(&self, t: f64) -> usize {
        if self.n_steps == 0 {
            return 0;
        }
        ((t / self.dt).floor().max(0.0) as usize).min(self.n_steps - 1)
    }

    /// Nearest node index to `t`.
    pub fn nearest(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.n_steps)
    }
}

/// Nodes `a_j = j / (n - 1)` on `[0, 1]`, endpoints included.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefGrid {
    n: usize,
}

impl BeliefGrid {
    pub fn new(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidInput(format!("belief grid needs at least 2 nodes, got {n}")));
        }
        Ok(Self { n })
    }

    pub fn n_nodes(&self) -> usize {
        self.n
    }

    pub fn n_cells(&self) -> usize {
        self.n - 1
    }

    pub fn da(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn node(&self, j: usize) -> f64 {
        if j + 1 == self.n {
            1.0
        } else {
            j as f64 * self.da()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n).map(|j| self.node(j)).collect()
    }

    /// Midpoint of cell `k`, which spans `[a_k, a_{k+1}]`.
    pub fn center(&self, k: usize) -> f64 {
        (k as f64 + 0.5) * self.da()
    }

    pub fn centers(&self) -> Vec<f64> {
        (0..self.n_cells()).map(|k| self.center(k)).collect()
    }

    /// Nearest node to `a`.
    pub fn nearest(&self, a: f64) -> usize {
        ((a.clamp(0.0, 1.0) / self.da()).round() as usize).min(self.n - 1)
    }

    /// Cell containing `a`; `a = 1` belongs to the last cell.
    pub fn cell_of(&self, a: f64) -> usize {
        ((a.clamp(0.0, 1.0) / self.da()).floor() as usize).min(self.n - 2)
    }
}

/// Grid function stored row-major as `(n_t + 1) x n_a`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Field {
    pub time: TimeGrid,
    pub belief: BeliefGrid,
    pub data: Vec<f64>,
}

impl Field {
    pub fn filled(time: TimeGrid, belief: BeliefGrid, value: f64) -> Self {
        Self { time, belief, data: vec![value; time.n_nodes() * belief.n_nodes()] }
    }

    /// Field equal to `slice` at every time node.
    pub fn constant_in_time(time: TimeGrid, belief: BeliefGrid, slice: &[f64]) -> Result<Self> {
        if slice.len() != belief.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "slice has {} values, grid has {} nodes",
                slice.len(),
                belief.n_nodes()
            )));
        }
        let mut data = Vec::with_capacity(time.n_nodes() * belief.n_nodes());
        for _ in 0..time.n_nodes() {
            data.extend_from_slice(slice);
        }
        Ok(Self { time, belief, data })
    }

    pub fn from_fn(time: TimeGrid, belief: BeliefGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut data = Vec::with_capacity(time.n_nodes() * belief.n_nodes());
        for n in 0..time.n_nodes() {
            let t = time.t(n);
            data.extend((0..belief.n_nodes()).map(|j| f(t, belief.node(j))));
        }
        Self { time, belief, data }
    }

    pub fn slice(&self, n: usize) -> &[f64] {
        let w = self.belief.n_nodes();
        &self.data[n * w..(n + 1) * w]
    }

    pub fn slice_mut(&mut self, n: usize) -> &mut [f64] {
        let w = self.belief.n_nodes();
        &mut self.data[n * w..(n + 1) * w]
    }

    pub fn get(&self, n: usize, j: usize) -> f64 {
        self.data[n * self.belief.n_nodes() + j]
    }

    /// The first `n_steps` intervals of the field.
    pub fn truncate(&self, n_steps: usize) -> Result<Self> {
        if n_steps > self.time.n_steps {
            return Err(Error::GridMismatch(format!("cannot keep {n_steps} of {} steps", self.time.n_steps)));
        }
        let time = TimeGrid::new(self.time.dt, n_steps)?;
        let data = self.data[..time.n_nodes() * self.belief.n_nodes()].to_vec();
        Ok(Self { time, belief: self.belief, data })
    }
}

/// Value function `phi_t(a)` for one attribute class.
pub type ValueField = Field;
/// Activity law `psi_t(a)` in `[0, 1]` for one attribute class.
pub type PolicyField = Field;
