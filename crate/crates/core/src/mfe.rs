//! Damped Picard iteration for mean-field equilibria: best response by the
//! HJB solver, population response by the density solver, repeat.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fpk::{propagate_population, BeliefDensity, PropagationOptions};
use crate::fully_observed::integrate_rho;
use crate::grid::{BeliefGrid, PolicyField, TimeGrid, ValueField};
use crate::hjb::{default_terminal, solve_hjb, solve_hjb_relaxed};
use crate::mean_field::{mfe_residual, MeanFieldPath};
use crate::model::ModelParams;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ClampMode {
    /// Clamp aggregated paths into the admissible box.
    #[default]
    Clamp,
    /// Fail with `InvalidMeanField` instead.
    Reject,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedPointConfig {
    #[serde(default = "default_damping")]
    pub damping: f64,
    #[serde(default = "default_tol")]
    pub tol: f64,
    #[serde(default = "default_max_iters")]
    pub max_iters: usize,
    #[serde(default)]
    pub clamp: ClampMode,
}

fn default_damping() -> f64 {
    0.5
}
fn default_tol() -> f64 {
    1e-5
}
fn default_max_iters() -> usize {
    200
}

impl Default for FixedPointConfig {
    fn default() -> Self {
        Self { damping: default_damping(), tol: default_tol(), max_iters: default_max_iters(), clamp: ClampMode::Clamp }
    }
}

impl FixedPointConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidInput(format!("damping must lie in (0, 1], got {}", self.damping)));
        }
        if !(self.tol > 0.0) {
            return Err(Error::InvalidInput(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

/// How agents observe their own state.
#[derive(Debug, Clone)]
pub enum Observation {
    /// Agents filter their belief; the population is a belief density.
    /// With `relaxed_switch` the best response places each switch inside the
    /// grid cell straddling it (see [`crate::hjb::relaxed_policy`]), which makes the
    /// population response continuous in the mean field.
    Partial { init: Vec<BeliefDensity>, grid: BeliefGrid, fpk: PropagationOptions, relaxed_switch: bool },
    /// Agents know their state; the population is a compartment vector
    /// `(s, a, i, r, d)` per attribute and the HJB runs on the two-node grid
    /// whose nodes are the susceptible and presymptomatic states.
    Full { rho0: Vec<[f64; 5]> },
}

#[derive(Debug, Clone)]
pub struct MfeProblem {
    pub params: ModelParams,
    pub time: TimeGrid,
    pub observation: Observation,
}

impl MfeProblem {
    pub fn grid(&self) -> BeliefGrid {
        match &self.observation {
            Observation::Partial { grid, .. } => *grid,
            Observation::Full { .. } => BeliefGrid::new(2).expect("two nodes"),
        }
    }

    /// `beta = sum p(theta) int a p0`, or the presymptomatic mass when fully
    /// observed, with `alpha = 0.5`.
    pub fn initial_guess(&self) -> Result<MeanFieldPath> {
        let weights: Vec<f64> = self.params.attributes.iter().map(|a| a.weight).collect();
        let beta = match &self.observation {
            Observation::Partial { init, grid, .. } => {
                init.iter().zip(&weights).map(|(d, w)| w * d.mean_belief_mass(grid)).sum()
            }
            Observation::Full { rho0 } => rho0.iter().zip(&weights).map(|(r, w)| w * r[1]).sum(),
        };
        let (mf, _) =
            MeanFieldPath::clamped(self.time, vec![beta; self.time.n_nodes()], vec![0.5; self.time.n_nodes()])?;
        Ok(mf)
    }
}

/// Best response of every attribute class to `mf`, with the default terminal
/// condition.
pub fn best_response(
    params: &ModelParams,
    mf: &MeanFieldPath,
    grid: &BeliefGrid,
) -> Result<(Vec<ValueField>, Vec<PolicyField>)> {
    best_response_with(params, mf, grid, false)
}

fn best_response_with(
    params: &ModelParams,
    mf: &MeanFieldPath,
    grid: &BeliefGrid,
    relaxed: bool,
) -> Result<(Vec<ValueField>, Vec<PolicyField>)> {
    let out: Result<Vec<(ValueField, PolicyField)>> = params
        .agents()
        .par_iter()
        .map(|m| {
            let term = default_terminal(grid, m)?;
            if relaxed {
                solve_hjb_relaxed(mf, &term, grid, m)
            } else {
                solve_hjb(mf, &term, grid, m)
            }
        })
        .collect();
    Ok(out?.into_iter().unzip())
}

impl MfeProblem {
    /// The best-response operator of this problem.
    pub fn best_response(&self, mf: &MeanFieldPath) -> Result<(Vec<ValueField>, Vec<PolicyField>)> {
        let relaxed = matches!(self.observation, Observation::Partial { relaxed_switch: true, .. });
        best_response_with(&self.params, mf, &self.grid(), relaxed)
    }
}

/// Mean-field path produced when everyone plays `psi` and the filter drift
/// uses `mf`.
pub fn population_response(
    problem: &MfeProblem,
    psi: &[PolicyField],
    mf: &MeanFieldPath,
    clamp: ClampMode,
) -> Result<MeanFieldPath> {
    let time = problem.time;
    let (beta, alpha) = match &problem.observation {
        Observation::Partial { init, grid, fpk, .. } => {
            let prop = propagate_population(&problem.params, psi, init, grid, Some(mf), *fpk)?;
            (prop.raw_beta, prop.raw_alpha)
        }
        Observation::Full { rho0 } => {
            let psi_s: Vec<Vec<f64>> = psi.iter().map(|q| (0..time.n_nodes()).map(|n| q.get(n, 0)).collect()).collect();
            let pop = integrate_rho(&problem.params, time, &psi_s, &mf.beta, rho0)?;
            let mut beta = vec![0.0; time.n_nodes()];
            let mut alpha = vec![0.0; time.n_nodes()];
            for (k, w) in pop.weights.iter().enumerate() {
                for n in 0..time.n_nodes() {
                    let r = pop.rho[k][n];
                    let (us, ua) = (psi[k].get(n, 0), psi[k].get(n, 1));
                    beta[n] += w * ua * r[1];
                    alpha[n] += w * (us * r[0] + ua * r[1] + r[3]);
                }
            }
            (beta, alpha)
        }
    };
    match clamp {
        ClampMode::Clamp => Ok(MeanFieldPath::clamped(time, beta, alpha)?.0),
        ClampMode::Reject => MeanFieldPath::new(time, beta, alpha),
    }
}

/// Outcome of a Picard run, converged or not.
#[derive(Debug, Clone)]
pub struct MfeResult {
    pub converged: bool,
    /// Last iterate; when converged, the policies below are its best response
    /// and the population response lies within `tol` of it.
    pub mean_field: MeanFieldPath,
    pub policy: Vec<PolicyField>,
    pub value: Vec<ValueField>,
    /// Sup-norm distance between each iterate and its image.
    pub history: Vec<f64>,
}

impl MfeResult {
    pub fn residual(&self) -> f64 {
        self.history.last().copied().unwrap_or(f64::INFINITY)
    }
}

/// Run the damped iteration `mf <- (1 - eta) mf + eta Xi(Psi(mf))` until the
/// image is within `tol` of the iterate or `max_iters` images were computed.
pub fn picard_run(problem: &MfeProblem, initial: MeanFieldPath, cfg: &FixedPointConfig) -> Result<MfeResult> {
    cfg.validate()?;
    if initial.time != problem.time {
        return Err(Error::GridMismatch("initial path and problem use different time grids".into()));
    }
    initial.validate()?;
    let mut mf = initial;
    let mut history = Vec::new();
    loop {
        let (value, policy) = problem.best_response(&mf)?;
        let image = population_response(problem, &policy, &mf, cfg.clamp)?;
        let r = mfe_residual(&mf, &image)?;
        history.push(r);
        log::info!("picard iteration {}: residual {r:e}", history.len());
        if r <= cfg.tol || history.len() >= cfg.max_iters {
            return Ok(MfeResult { converged: r <= cfg.tol, mean_field: mf, policy, value, history });
        }
        let eta = cfg.damping;
        for (x, y) in mf.beta.iter_mut().zip(&image.beta) {
            *x = (1.0 - eta) * *x + eta * y;
        }
        for (x, y) in mf.alpha.iter_mut().zip(&image.alpha) {
            *x = (1.0 - eta) * *x + eta * y;
        }
    }
}

/// Like [`picard_run`] but non-convergence is an error carrying the history.
pub fn picard_iterate(problem: &MfeProblem, initial: MeanFieldPath, cfg: &FixedPointConfig) -> Result<MfeResult> {
    let res = picard_run(problem, initial, cfg)?;
    if res.converged {
        Ok(res)
    } else {
        Err(Error::NotConverged { iters: res.history.len(), last_residual: res.residual(), history: res.history })
    }
}

/// Distance moved by one further best-response/population-response pass.
pub fn verify_fixed_point(problem: &MfeProblem, res: &MfeResult, clamp: ClampMode) -> Result<f64> {
    let (_, policy) = problem.best_response(&res.mean_field)?;
    let image = population_response(problem, &policy, &res.mean_field, clamp)?;
    mfe_residual(&res.mean_field, &image)
}
