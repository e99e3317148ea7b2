//! Time-gridded mean-field pair `(beta_t, alpha_t)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TimeGrid;

pub const BETA_MAX: f64 = 1.0 - 1e-9;
pub const ALPHA_MIN: f64 = 1e-9;
pub const ALPHA_MAX: f64 = 1.0 - 1e-9;

/// Activity of the infectious population `beta` and of everyone `alpha`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldPath {
    pub time: TimeGrid,
    pub beta: Vec<f64>,
    pub alpha: Vec<f64>,
}

impl MeanFieldPath {
    /// Build a path, rejecting values outside `0 <= beta < 1`, `0 < alpha < 1`.
    pub fn new(time: TimeGrid, beta: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        let path = Self::unchecked(time, beta, alpha)?;
        path.validate()?;
        Ok(path)
    }

    /// Build a path, clamping out-of-range values. Returns the number of clamped entries.
    pub fn clamped(time: TimeGrid, beta: Vec<f64>, alpha: Vec<f64>) -> Result<(Self, usize)> {
        let mut path = Self::unchecked(time, beta, alpha)?;
        let n = path.clamp();
        Ok((path, n))
    }

    fn unchecked(time: TimeGrid, beta: Vec<f64>, alpha: Vec<f64>) -> Result<Self> {
        if beta.len() != time.n_nodes() || alpha.len() != time.n_nodes() {
            return Err(Error::GridMismatch(format!(
                "mean-field arrays have lengths {}/{}, time grid has {} nodes",
                beta.len(),
                alpha.len(),
                time.n_nodes()
            )));
        }
        Ok(Self { time, beta, alpha })
    }

    pub fn constant(time: TimeGrid, beta: f64, alpha: f64) -> Result<Self> {
        Self::new(time, vec![beta; time.n_nodes()], vec![alpha; time.n_nodes()])
    }

    pub fn validate(&self) -> Result<()> {
        for (n, (&b, &a)) in self.beta.iter().zip(&self.alpha).enumerate() {
            if !(0.0..=BETA_MAX).contains(&b) {
                return Err(Error::InvalidMeanField(format!("beta[{n}] = {b} outside [0, 1)")));
            }
            if !(ALPHA_MIN..=ALPHA_MAX).contains(&a) {
                return Err(Error::InvalidMeanField(format!("alpha[{n}] = {a} outside (0, 1)")));
            }
        }
        Ok(())
    }

    /// Clamp into the admissible box. Returns the number of clamped entries.
    ///
    /// Values that sit on the closed boundary (everyone active, say) are moved
    /// silently; anything further out is logged as a warning.
    pub fn clamp(&mut self) -> usize {
        let mut count = 0;
        let mut far = 0;
        let mut fix = |x: &mut f64, c: f64| {
            if c != *x {
                count += 1;
                if !((c - *x).abs() <= 1e-6) {
                    far += 1;
                }
                *x = c;
            }
        };
        for b in &mut self.beta {
            let c = if b.is_nan() { 0.0 } else { b.clamp(0.0, BETA_MAX) };
            fix(b, c);
        }
        for a in &mut self.alpha {
            let c = if a.is_nan() { 0.5 } else { a.clamp(ALPHA_MIN, ALPHA_MAX) };
            fix(a, c);
        }
        if far > 0 {
            log::warn!("clamped {far} mean-field values into the admissible box");
        } else if count > 0 {
            log::debug!("moved {count} boundary mean-field values inside the admissible box");
        }
        count
    }

    /// The first `n_steps` intervals of the path.
    pub fn truncate(&self, n_steps: usize) -> Result<Self> {
        if n_steps > self.time.n_steps {
            return Err(Error::GridMismatch(format!("cannot keep {n_steps} of {} steps", self.time.n_steps)));
        }
        let time = TimeGrid::new(self.time.dt, n_steps)?;
        let k = time.n_nodes();
        Ok(Self { time, beta: self.beta[..k].to_vec(), alpha: self.alpha[..k].to_vec() })
    }

    /// Linear interpolation of beta at time `t`.
    pub fn beta_at(&self, t: f64) -> f64 {
        interp(&self.time, &self.beta, t)
    }

    pub fn alpha_at(&self, t: f64) -> f64 {
        interp(&self.time, &self.alpha, t)
    }
}

pub(crate) fn interp(time: &TimeGrid, v: &[f64], t: f64) -> f64 {
    if time.n_steps == 0 {
        return v[0];
    }
    let k = time.interval(t);
    let w = ((t - time.t(k)) / time.dt).clamp(0.0, 1.0);
    v[k] * (1.0 - w) + v[k + 1] * w
}

/// Sup over nodes of `max(|d beta|, |d alpha|)`.
pub fn mfe_residual(old: &MeanFieldPath, new: &MeanFieldPath) -> Result<f64> {
    if old.time != new.time || old.beta.len() != new.beta.len() {
        return Err(Error::GridMismatch("mean-field paths live on different time grids".into()));
    }
    let db = old.beta.iter().zip(&new.beta).map(|(x, y)| (x - y).abs());
    let da = old.alpha.iter().zip(&new.alpha).map(|(x, y)| (x - y).abs());
    Ok(db.chain(da).fold(0.0, f64::max))
}
