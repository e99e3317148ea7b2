//! Backward HJB solver on the belief interval and its false-transient
//! stationary version.
//!
//! Nodes carry `phi(a_j)`. Both candidate drifts `f_u(a) = (1-a)(lambda_sa beta u - lambda_ai a)`
//! are upwinded separately, and the control minimizes the resulting discrete
//! Hamiltonian. The reaction `lambda_ai a (phi_i - phi) - gamma phi` is treated
//! implicitly, which keeps the scheme monotone under the CFL bound.

use crate::error::{Error, Result};
use crate::fully_observed::{phi_bar_a, phi_bar_i};
use crate::grid::{BeliefGrid, Field, PolicyField, TimeGrid, ValueField};
use crate::mean_field::MeanFieldPath;
use crate::model::AgentModel;

pub const CFL_SAFETY: f64 = 0.9;

/// `M(a) = lambda_sa beta (1-a) dphi/da + c_a a - alpha`; activity pays iff `M < 0`.
pub fn switching_term(a: f64, dphida: f64, beta: f64, alpha: f64, m: &AgentModel) -> f64 {
    m.lambda_sa * beta * (1.0 - a) * dphida + m.c_a * a - alpha
}

/// Largest stable step for activity level `beta` on `grid`.
pub fn cfl_limit(grid: &BeliefGrid, beta: f64, m: &AgentModel) -> f64 {
    let max_aa = grid.nodes().iter().map(|a| a * (1.0 - a)).fold(0.0, f64::max);
    let speed = m.lambda_ai * max_aa + m.lambda_sa * beta;
    if speed > 0.0 {
        grid.da() / speed
    } else {
        f64::INFINITY
    }
}

/// Linear interpolant between `phi(0) = 0` and `phi(1) = phi_bar(a)`.
pub fn default_terminal(grid: &BeliefGrid, m: &AgentModel) -> Result<Vec<f64>> {
    let pa = phi_bar_a(m)?;
    Ok(grid.nodes().iter().map(|a| a * pa).collect())
}

/// Default truncation horizon `10 / gamma`.
pub fn default_horizon(m: &AgentModel) -> f64 {
    10.0 / m.gamma
}

/// One backward step from `phi_next` at `t + dt` to `t`, writing into `phi` and `psi`.
#[allow(clippy::too_many_arguments)]
fn step_into(
    grid: &BeliefGrid,
    phi_next: &[f64],
    phi: &mut [f64],
    psi: &mut [f64],
    mut score: Option<&mut [f64]>,
    beta: f64,
    alpha: f64,
    dt: f64,
    m: &AgentModel,
    phi_i: f64,
) {
    let n = grid.n_nodes();
    let inv_da = 1.0 / grid.da();
    let sb = m.lambda_sa * beta;
    for j in 0..n {
        let a = grid.node(j);
        let fw = if j + 1 < n { (phi_next[j + 1] - phi_next[j]) * inv_da } else { 0.0 };
        let bw = if j > 0 { (phi_next[j] - phi_next[j - 1]) * inv_da } else { 0.0 };
        let f0 = -(1.0 - a) * a * m.lambda_ai;
        let f1 = (1.0 - a) * (sb - a * m.lambda_ai);
        let h0 = f0 * if f0 > 0.0 { fw } else { bw };
        let h1 = f1 * if f1 > 0.0 { fw } else { bw } + m.c_a * a - alpha;
        let (h, u) = if h1 < h0 { (h1, 1.0) } else { (h0, 0.0) };
        let react = m.lambda_ai * a;
        phi[j] = (phi_next[j] + dt * (h + react * phi_i)) / (1.0 + dt * (m.gamma + react));
        psi[j] = u;
        if let Some(sc) = score.as_deref_mut() {
            sc[j] = h1 - h0;
        }
    }
}

/// Fraction of each node's cell `[a_j - da/2, a_j + da/2]` on which the
/// linear interpolant of the switching score is negative (active).
///
/// Equals the bang-bang policy away from switches and places the switch
/// inside the cell straddling it.
pub fn relaxed_policy(score: &[f64], grid: &BeliefGrid) -> Vec<f64> {
    // Share of the half segment next to `s0` (towards `s1`) where the
    // interpolant is negative.
    let half = |s0: f64, s1: f64| -> f64 {
        let mid = 0.5 * (s0 + s1);
        match (s0 < 0.0, mid < 0.0) {
            (true, true) => 1.0,
            (false, false) => 0.0,
            _ => {
                let x = (s0 / (s0 - s1)).clamp(0.0, 0.5) * 2.0;
                if s0 < 0.0 {
                    x
                } else {
                    1.0 - x
                }
            }
        }
    };
    let n = grid.n_nodes();
    (0..n)
        .map(|j| {
            let mut acc = 0.0;
            let mut parts = 0.0;
            if j > 0 {
                acc += half(score[j], score[j - 1]);
                parts += 1.0;
            }
            if j + 1 < n {
                acc += half(score[j], score[j + 1]);
                parts += 1.0;
            }
            if parts > 0.0 {
                acc / parts
            } else {
                f64::from(score[j] < 0.0)
            }
        })
        .collect()
}

/// One backward step with coefficients frozen at `(beta, alpha)`.
pub fn hjb_backward_step(
    phi_next: &[f64],
    beta: f64,
    alpha: f64,
    dt: f64,
    grid: &BeliefGrid,
    m: &AgentModel,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if phi_next.len() != grid.n_nodes() {
        return Err(Error::GridMismatch(format!(
            "value slice has {} entries, grid has {}",
            phi_next.len(),
            grid.n_nodes()
        )));
    }
    let limit = cfl_limit(grid, beta, m);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let phi_i = phi_bar_i(m)?;
    let mut phi = vec![0.0; grid.n_nodes()];
    let mut psi = vec![0.0; grid.n_nodes()];
    step_into(grid, phi_next, &mut phi, &mut psi, None, beta, alpha, dt, m, phi_i);
    Ok((phi, psi))
}

/// Backward sweep over the time grid of `mf`.
///
/// Each time interval is split into equal substeps satisfying the CFL bound,
/// with `(beta, alpha)` frozen at the interval's left node. The policy stored
/// at node `n` is the one selected by the last substep ending at `t_n`; the
/// terminal node stores the policy of the terminal slice.
pub fn solve_hjb(
    mf: &MeanFieldPath,
    terminal: &[f64],
    grid: &BeliefGrid,
    m: &AgentModel,
) -> Result<(ValueField, PolicyField)> {
    sweep(mf, terminal, grid, m, false)
}

/// [`solve_hjb`] with each stored policy slice passed through
/// [`relaxed_policy`].
pub fn solve_hjb_relaxed(
    mf: &MeanFieldPath,
    terminal: &[f64],
    grid: &BeliefGrid,
    m: &AgentModel,
) -> Result<(ValueField, PolicyField)> {
    sweep(mf, terminal, grid, m, true)
}

fn sweep(
    mf: &MeanFieldPath,
    terminal: &[f64],
    grid: &BeliefGrid,
    m: &AgentModel,
    relaxed: bool,
) -> Result<(ValueField, PolicyField)> {
    if terminal.len() != grid.n_nodes() {
        return Err(Error::GridMismatch(format!(
            "terminal slice has {} entries, grid has {}",
            terminal.len(),
            grid.n_nodes()
        )));
    }
    let time = mf.time;
    let phi_i = phi_bar_i(m)?;
    let mut value = Field::filled(time, *grid, 0.0);
    let mut policy = Field::filled(time, *grid, 0.0);
    let nt = time.n_steps;
    let mut score = vec![0.0; grid.n_nodes()];
    let mut psi = vec![0.0; grid.n_nodes()];
    let store = |policy: &mut Field, n: usize, psi: &[f64], score: &[f64]| {
        if relaxed {
            policy.slice_mut(n).copy_from_slice(&relaxed_policy(score, grid));
        } else {
            policy.slice_mut(n).copy_from_slice(psi);
        }
    };
    value.slice_mut(nt).copy_from_slice(terminal);
    {
        let mut scratch = vec![0.0; grid.n_nodes()];
        step_into(grid, terminal, &mut scratch, &mut psi, Some(&mut score), mf.beta[nt], mf.alpha[nt], 0.0, m, phi_i);
        store(&mut policy, nt, &psi, &score);
    }
    let mut cur = terminal.to_vec();
    let mut next = vec![0.0; grid.n_nodes()];
    for n in (0..nt).rev() {
        let (beta, alpha) = (mf.beta[n], mf.alpha[n]);
        let limit = CFL_SAFETY * cfl_limit(grid, beta, m);
        let k = (time.dt / limit).ceil().max(1.0) as usize;
        let h = time.dt / k as f64;
        for _ in 0..k {
            step_into(grid, &cur, &mut next, &mut psi, Some(&mut score), beta, alpha, h, m, phi_i);
            std::mem::swap(&mut cur, &mut next);
        }
        value.slice_mut(n).copy_from_slice(&cur);
        store(&mut policy, n, &psi, &score);
    }
    Ok((value, policy))
}

/// Solve with the default terminal condition on `[0, horizon]` for constant
/// mean-field terms.
pub fn solve_hjb_constant(
    beta: f64,
    alpha: f64,
    horizon: f64,
    dt: f64,
    grid: &BeliefGrid,
    m: &AgentModel,
) -> Result<(ValueField, PolicyField)> {
    let time = TimeGrid::covering(horizon, dt)?;
    let mf = MeanFieldPath::constant(time, beta, alpha)?;
    solve_hjb(&mf, &default_terminal(grid, m)?, grid, m)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationaryOptions {
    /// Stop when `sup |phi_{k+1} - phi_k| / dt` falls below this.
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for StationaryOptions {
    fn default() -> Self {
        Self { tol: 1e-8, max_iters: 50_000_000 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StationaryHjb {
    pub grid: BeliefGrid,
    pub phi: Vec<f64>,
    pub psi: Vec<f64>,
    pub iters: usize,
    pub dt: f64,
    /// Final `sup |d phi| / dt`.
    pub residual: f64,
}

impl StationaryHjb {
    /// First node where the policy is 0, i.e. the discrete isolation threshold.
    pub fn threshold(&self) -> Option<f64> {
        policy_threshold(&self.psi, &self.grid)
    }
}

/// First node at which a policy slice switches off.
pub fn policy_threshold(psi: &[f64], grid: &BeliefGrid) -> Option<f64> {
    psi.iter().position(|&u| u < 0.5).map(|j| grid.node(j))
}

/// Stationary HJB by marching the time-dependent equation backward with
/// frozen `(beta_bar, alpha_bar)` from the default terminal slice.
pub fn solve_stationary_hjb(
    beta_bar: f64,
    alpha_bar: f64,
    grid: &BeliefGrid,
    m: &AgentModel,
    opts: StationaryOptions,
) -> Result<StationaryHjb> {
    let phi_i = phi_bar_i(m)?;
    let dt = CFL_SAFETY * cfl_limit(grid, beta_bar, m);
    // A degenerate grid has no transport; any step is stable for the reaction part.
    let dt = if dt.is_finite() { dt } else { 1.0 / m.gamma };
    let mut cur = default_terminal(grid, m)?;
    let mut next = vec![0.0; grid.n_nodes()];
    let mut psi = vec![0.0; grid.n_nodes()];
    let mut residual = f64::INFINITY;
    let mut history = Vec::new();
    for it in 1..=opts.max_iters {
        step_into(grid, &cur, &mut next, &mut psi, None, beta_bar, alpha_bar, dt, m, phi_i);
        residual = cur.iter().zip(&next).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / dt;
        std::mem::swap(&mut cur, &mut next);
        if it % 10_000 == 0 {
            history.push(residual);
        }
        if residual < opts.tol {
            return Ok(StationaryHjb { grid: *grid, phi: cur, psi, iters: it, dt, residual });
        }
    }
    history.push(residual);
    Err(Error::NotConverged { iters: opts.max_iters, last_residual: residual, history })
}
