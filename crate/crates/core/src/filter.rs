//! Nonlinear filter for the probability `A_t` of being presymptomatic, between
//! symptom-free observations.

use crate::error::{Error, Result};
use crate::grid::{PolicyField, TimeGrid};
use crate::mean_field::MeanFieldPath;
use crate::model::AgentModel;

const MAX_HALVINGS: u32 = 30;

/// `dA/dt = (1 - A)(lambda_sa beta u - A lambda_ai)`.
#[inline]
pub fn filter_drift(a: f64, beta: f64, u: f64, m: &AgentModel) -> f64 {
    (1.0 - a) * (m.lambda_sa * beta * u - a * m.lambda_ai)
}

/// Exact solution of `dA/dt = -lambda A (1 - A)`.
pub fn logistic_closed_form(a0: f64, lambda_ai: f64, t: f64) -> f64 {
    let e = (-lambda_ai * t).exp();
    a0 * e / (1.0 - a0 + a0 * e)
}

/// Belief trajectory on a time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefPath {
    pub time: TimeGrid,
    pub a: Vec<f64>,
    /// Index of symptom onset, if the caller recorded one.
    pub stopped_at: Option<usize>,
}

fn rk4(a: f64, h: f64, f: impl Fn(f64, f64) -> f64, t: f64) -> f64 {
    let k1 = f(t, a);
    let k2 = f(t + 0.5 * h, a + 0.5 * h * k1);
    let k3 = f(t + 0.5 * h, a + 0.5 * h * k2);
    let k4 = f(t + h, a + h * k3);
    a + h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
}

/// Advance the filter over `[t, t + dt]` with drift `f(t, a)`.
///
/// A step whose stages leave `[0, 1]` is split in half recursively; beyond
/// 30 halvings the step is rejected.
pub fn filter_advance(a: f64, t: f64, dt: f64, f: &impl Fn(f64, f64) -> f64) -> Result<f64> {
    fn go(a: f64, t: f64, h: f64, f: &impl Fn(f64, f64) -> f64, depth: u32) -> Result<f64> {
        let next = rk4(a, h, f, t);
        if (0.0..=1.0).contains(&next) {
            return Ok(next);
        }
        // Overshoot by rounding only.
        if next > 1.0 && next - 1.0 < 1e-14 {
            return Ok(1.0);
        }
        if next < 0.0 && next > -1e-14 {
            return Ok(0.0);
        }
        if depth >= MAX_HALVINGS || !next.is_finite() {
            return Err(Error::StepUnstable { t, reason: format!("belief left [0,1]: {next}") });
        }
        let mid = go(a, t, 0.5 * h, f, depth + 1)?;
        go(mid, t + 0.5 * h, 0.5 * h, f, depth + 1)
    }
    if a == 1.0 {
        return Ok(1.0);
    }
    go(a, t, dt, f, 0)
}

/// Advance with frozen `beta` and `u` over `dt`.
pub fn filter_step(m: &AgentModel, a: f64, beta: f64, u: f64, dt: f64) -> Result<f64> {
    filter_advance(a, 0.0, dt, &|_, x| filter_drift(x, beta, u, m))
}

/// Closed-loop filter `dA/dt = (1 - A)(lambda_sa beta_t control(t, A) - A lambda_ai)`.
pub fn integrate_filter(
    m: &AgentModel,
    a0: f64,
    time: TimeGrid,
    beta: impl Fn(f64) -> f64,
    control: impl Fn(f64, f64) -> f64,
) -> Result<BeliefPath> {
    if !(0.0..=1.0).contains(&a0) {
        return Err(Error::InvalidInput(format!("initial belief {a0} outside [0,1]")));
    }
    let f = |t: f64, x: f64| filter_drift(x, beta(t), control(t, x), m);
    let mut a = Vec::with_capacity(time.n_nodes());
    a.push(a0);
    let mut x = a0;
    for n in 0..time.n_steps {
        x = filter_advance(x, time.t(n), time.dt, &f)?;
        a.push(x);
    }
    Ok(BeliefPath { time, a, stopped_at: None })
}

/// Closed-loop filter driven by a grid policy `u = psi_t(A)`.
///
/// The policy slice is the one at the start of the current policy interval,
/// evaluated at the nearest belief node.
pub fn integrate_filter_with_policy(
    m: &AgentModel,
    a0: f64,
    time: TimeGrid,
    mf: &MeanFieldPath,
    psi: &PolicyField,
) -> Result<BeliefPath> {
    integrate_filter(
        m,
        a0,
        time,
        |t| mf.beta_at(t),
        |t, x| {
            let n = psi.time.interval(t);
            psi.get(n, psi.belief.nearest(x))
        },
    )
}
