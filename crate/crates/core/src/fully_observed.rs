//! Fully observed agents: closed-form values, the stationary susceptible
//! problem, the population ODE and the equilibrium in which infected agents
//! isolate.

use ode_solvers::{Dopri5, OutputType, System, Vector5};
use serde::Serialize;

use crate::error::{Error, ParamError, Result};
use crate::grid::TimeGrid;
use crate::mean_field::{MeanFieldPath, ALPHA_MAX};
use crate::model::{AgentModel, EpiState, ModelParams};

const ODE_ATOL: f64 = 1e-10;
const ODE_RTOL: f64 = 1e-8;

/// `phi_bar(i)` without the positivity check.
pub fn phi_bar_i_raw(m: &AgentModel) -> f64 {
    (m.c_h_i + m.lambda_ir * m.phi_r + m.lambda_id * m.phi_d) / (m.gamma + m.removal_rate())
}

/// Discounted cost-to-go of a symptomatic agent.
pub fn phi_bar_i(m: &AgentModel) -> Result<f64> {
    let v = phi_bar_i_raw(m);
    if v > 0.0 {
        Ok(v)
    } else {
        Err(ParamError::NonpositivePhiI { theta: m.theta.clone(), value: v }.into())
    }
}

/// Cost-to-go of a presymptomatic agent who knows their state and isolates.
pub fn phi_bar_a(m: &AgentModel) -> Result<f64> {
    Ok(m.lambda_ai / (m.gamma + m.lambda_ai) * phi_bar_i(m)?)
}

/// Infected activity level at which a susceptible agent is indifferent.
pub fn beta_crit(m: &AgentModel, alpha_bar: f64) -> Result<f64> {
    Ok(alpha_bar / (m.lambda_sa * phi_bar_a(m)?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum SusceptibleRegime {
    ActiveSusceptible,
    IsolatedSusceptible,
}

/// Stationary value and bang-bang control of a susceptible agent facing
/// constant `(beta_bar, alpha_bar)`. The tie `beta_bar = beta_crit` isolates.
pub fn stationary_susceptible(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<(f64, u8)> {
    let phi_a = phi_bar_a(m)?;
    if m.lambda_sa * beta_bar * phi_a < alpha_bar {
        Ok((active_susceptible_value(m, beta_bar, alpha_bar)?, 1))
    } else {
        Ok((0.0, 0))
    }
}

/// Value of a susceptible agent who stays active forever.
pub fn active_susceptible_value(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<f64> {
    let x = m.lambda_sa * beta_bar;
    Ok((x * phi_bar_a(m)? - alpha_bar) / (x + m.gamma))
}

/// Residual of `gamma v = min(0, lambda_sa beta (phi_a - v) - alpha)` at `(v, u)`.
pub fn stationary_susceptible_residual(m: &AgentModel, beta_bar: f64, alpha_bar: f64, v: f64, u: u8) -> Result<f64> {
    let phi_a = phi_bar_a(m)?;
    let switching = m.lambda_sa * beta_bar * (phi_a - v) - alpha_bar;
    let lhs = m.gamma * v;
    let hjb = lhs - switching.min(0.0);
    let control = lhs - f64::from(u) * switching;
    Ok(hjb.abs().max(control.abs()))
}

/// Feedback law for the fully observed chain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StatePolicy {
    pub s: u8,
    pub a: u8,
    pub i: u8,
}

impl StatePolicy {
    pub fn get(&self, x: EpiState) -> u8 {
        match x {
            EpiState::S => self.s,
            EpiState::A => self.a,
            EpiState::I => self.i,
            EpiState::R | EpiState::D => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FullyObservedSolution {
    pub theta: String,
    pub phi_i: f64,
    pub phi_a: f64,
    pub v_s: f64,
    pub policy: StatePolicy,
    pub regime: SusceptibleRegime,
}

/// Stationary fully observed solution against constant mean-field terms.
pub fn solve_stationary(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<FullyObservedSolution> {
    let phi_i = phi_bar_i(m)?;
    let phi_a = phi_bar_a(m)?;
    let (v_s, u) = stationary_susceptible(m, beta_bar, alpha_bar)?;
    Ok(FullyObservedSolution {
        theta: m.theta.clone(),
        phi_i,
        phi_a,
        v_s,
        policy: StatePolicy { s: u, a: infected_control(m, alpha_bar), i: infected_control(m, alpha_bar) },
        regime: if u == 1 { SusceptibleRegime::ActiveSusceptible } else { SusceptibleRegime::IsolatedSusceptible },
    })
}

/// An infected agent's activity does not move their state, so only the
/// running cost `(c_a - alpha) u` matters. Ties isolate.
fn infected_control(m: &AgentModel, alpha: f64) -> u8 {
    u8::from(m.c_a < alpha)
}

/// Best response of a fully observed agent to a time-varying mean field.
///
/// The susceptible value solves `-v' + gamma v = min_u u (lambda_sa beta (phi_a - v) - alpha)`
/// backward from the stationary value for the terminal `(beta_T, alpha_T)`.
/// Returns the susceptible value path and the per-node policy.
pub fn fo_best_response(m: &AgentModel, mf: &MeanFieldPath) -> Result<(Vec<f64>, Vec<StatePolicy>)> {
    let phi_a = phi_bar_a(m)?;
    let nt = mf.time.n_steps;
    let dt = mf.time.dt;
    let mut v = vec![0.0; nt + 1];
    let mut pol = vec![StatePolicy { s: 0, a: 0, i: 0 }; nt + 1];
    let (v_t, u_t) = stationary_susceptible(m, mf.beta[nt], mf.alpha[nt])?;
    v[nt] = v_t;
    pol[nt] = StatePolicy { s: u_t, a: infected_control(m, mf.alpha[nt]), i: infected_control(m, mf.alpha[nt]) };
    for n in (0..nt).rev() {
        let x = m.lambda_sa * mf.beta[n];
        let switching = x * (phi_a - v[n + 1]) - mf.alpha[n];
        let u = u8::from(switching < 0.0);
        // Implicit in the -x v reaction term, explicit in the rest.
        let uf = f64::from(u);
        v[n] = (v[n + 1] + dt * uf * (x * phi_a - mf.alpha[n])) / (1.0 + dt * (m.gamma + uf * x));
        pol[n] = StatePolicy { s: u, a: infected_control(m, mf.alpha[n]), i: infected_control(m, mf.alpha[n]) };
    }
    Ok((v, pol))
}

/// Per-attribute compartment trajectories `rho_t(x; theta)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationPath {
    pub time: TimeGrid,
    pub thetas: Vec<String>,
    pub weights: Vec<f64>,
    /// `rho[theta][n]` ordered `(s, a, i, r, d)`.
    pub rho: Vec<Vec<[f64; 5]>>,
}

impl PopulationPath {
    /// Attribute-weighted compartment fractions at node `n`.
    pub fn aggregate(&self, n: usize) -> [f64; 5] {
        let mut out = [0.0; 5];
        for (w, traj) in self.weights.iter().zip(&self.rho) {
            for (o, x) in out.iter_mut().zip(traj[n]) {
                *o += w * x;
            }
        }
        out
    }
}

struct RhoOde {
    lambda_sa: f64,
    lambda_ai: f64,
    lambda_ir: f64,
    lambda_id: f64,
    psi_s: f64,
    t0: f64,
    dt: f64,
    beta0: f64,
    beta1: f64,
}

impl System<f64, Vector5<f64>> for RhoOde {
    fn system(&self, t: f64, y: &Vector5<f64>, dy: &mut Vector5<f64>) {
        let w = ((t - self.t0) / self.dt).clamp(0.0, 1.0);
        let beta = self.beta0 * (1.0 - w) + self.beta1 * w;
        let infect = self.lambda_sa * beta * self.psi_s * y[0];
        dy[0] = -infect;
        dy[1] = infect - self.lambda_ai * y[1];
        dy[2] = self.lambda_ai * y[1] - (self.lambda_ir + self.lambda_id) * y[2];
        dy[3] = self.lambda_ir * y[2];
        dy[4] = self.lambda_id * y[2];
    }
}

fn check_pmf(rho: &[f64; 5], what: &str) -> Result<()> {
    let total: f64 = rho.iter().sum();
    if rho.iter().any(|&x| !(x >= 0.0)) || (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidInput(format!("{what} is not a pmf: {rho:?}")));
    }
    Ok(())
}

/// Integrate the compartment ODE for every attribute class.
///
/// `psi_s[theta][n]` is the susceptible activity on `[t_n, t_{n+1})`; `beta` is
/// linear between nodes. Each interval is integrated with an adaptive
/// Dormand-Prince scheme.
pub fn integrate_rho(
    params: &ModelParams,
    time: TimeGrid,
    psi_s: &[Vec<f64>],
    beta: &[f64],
    rho0: &[[f64; 5]],
) -> Result<PopulationPath> {
    let agents = params.agents();
    if rho0.len() != agents.len() || psi_s.len() != agents.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} attribute classes, got rho0 {} / policy {}",
            agents.len(),
            rho0.len(),
            psi_s.len()
        )));
    }
    if beta.len() != time.n_nodes() || psi_s.iter().any(|p| p.len() != time.n_nodes()) {
        return Err(Error::GridMismatch("policy or beta path does not match the time grid".into()));
    }
    let mut rho = Vec::with_capacity(agents.len());
    for (k, m) in agents.iter().enumerate() {
        check_pmf(&rho0[k], "rho0")?;
        let mut traj = Vec::with_capacity(time.n_nodes());
        traj.push(rho0[k]);
        let mut y = Vector5::from_row_slice(&rho0[k]);
        for n in 0..time.n_steps {
            let (t0, t1) = (time.t(n), time.t(n + 1));
            let sys = RhoOde {
                lambda_sa: m.lambda_sa,
                lambda_ai: m.lambda_ai,
                lambda_ir: m.lambda_ir,
                lambda_id: m.lambda_id,
                psi_s: psi_s[k][n],
                t0,
                dt: time.dt,
                beta0: beta[n],
                beta1: beta[n + 1],
            };
            let mut solver = Dopri5::new(sys, t0, t1, time.dt, y, ODE_RTOL, ODE_ATOL);
            solver.set_output(OutputType::Sparse);
            solver.integrate().map_err(|e| Error::StepUnstable { t: t0, reason: e.to_string() })?;
            y = *solver.y_out().last().ok_or_else(|| Error::StepUnstable { t: t0, reason: "no output".into() })?;
            let mut r = [y[0], y[1], y[2], y[3], y[4]];
            for x in &mut r {
                if *x < 0.0 && *x > -ODE_ATOL {
                    *x = 0.0;
                }
            }
            let total: f64 = r.iter().sum();
            if (total - 1.0).abs() > 1e-8 || r.iter().any(|&x| x < 0.0) {
                return Err(Error::StepUnstable { t: t1, reason: format!("probability not preserved: {r:?}") });
            }
            traj.push(r);
        }
        rho.push(traj);
    }
    Ok(PopulationPath {
        time,
        thetas: agents.iter().map(|m| m.theta.clone()).collect(),
        weights: agents.iter().map(|m| m.weight).collect(),
        rho,
    })
}

/// Fully observed equilibrium on a finite horizon.
#[derive(Debug, Clone)]
pub struct FoMfe {
    pub solutions: Vec<FullyObservedSolution>,
    pub population: PopulationPath,
    pub mean_field: MeanFieldPath,
    /// `alpha_t` reached the open upper bound and was clamped.
    pub degenerate_alpha: bool,
}

/// Equilibrium in which susceptible agents are active, infected agents
/// isolate, `beta = 0` and `alpha_t = sum_theta p(theta)(rho_0(s) + rho_t(r))`.
pub fn fo_mfe(params: &ModelParams, time: TimeGrid, rho0: &[[f64; 5]]) -> Result<FoMfe> {
    let agents = params.agents();
    let psi_s = vec![vec![1.0; time.n_nodes()]; agents.len()];
    let beta = vec![0.0; time.n_nodes()];
    let population = integrate_rho(params, time, &psi_s, &beta, rho0)?;
    let alpha: Vec<f64> = (0..time.n_nodes())
        .map(|n| agents.iter().enumerate().map(|(k, m)| m.weight * (rho0[k][0] + population.rho[k][n][3])).sum())
        .collect();
    let degenerate_alpha = alpha.iter().any(|&a| a >= ALPHA_MAX);
    if degenerate_alpha {
        log::warn!("alpha path touches 1; no infected mass and the activity bound is degenerate");
    }
    let (mean_field, _) = MeanFieldPath::clamped(time, beta, alpha)?;
    let mut solutions = Vec::with_capacity(agents.len());
    for m in &agents {
        let (v, pol) = fo_best_response(m, &mean_field)?;
        solutions.push(FullyObservedSolution {
            theta: m.theta.clone(),
            phi_i: phi_bar_i(m)?,
            phi_a: phi_bar_a(m)?,
            v_s: v[0],
            policy: pol[0],
            regime: if pol[0].s == 1 {
                SusceptibleRegime::ActiveSusceptible
            } else {
                SusceptibleRegime::IsolatedSusceptible
            },
        });
    }
    Ok(FoMfe { solutions, population, mean_field, degenerate_alpha })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p0() -> AgentModel {
        ModelParams::canonical().agent(0)
    }

    #[test]
    fn closed_form_values() {
        let m = p0();
        assert_abs_diff_eq!(phi_bar_i(&m).unwrap(), 3.333333, epsilon = 1e-6);
        assert_abs_diff_eq!(phi_bar_a(&m).unwrap(), 3.174603, epsilon = 1e-6);
        let mut z = m.clone();
        z.phi_d = 0.0;
        assert_abs_diff_eq!(phi_bar_i(&z).unwrap(), 1.666667, epsilon = 1e-6);
        z.c_h_i = 0.0;
        assert!(phi_bar_i(&z).is_err());
        let mut g = m.clone();
        g.gamma = 100.0;
        // phi_bar_i moves with gamma; check the ratio formula at the stated phi_i.
        assert_abs_diff_eq!(2.0 / 102.0 * 3.333333, 0.065359, epsilon = 1e-6);
        assert!(phi_bar_a(&g).unwrap() < phi_bar_i(&g).unwrap());
        let mut big = m.clone();
        big.lambda_ai = 1e9;
        assert_abs_diff_eq!(phi_bar_a(&big).unwrap() / phi_bar_i(&big).unwrap(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn beta_crit_examples() {
        let m = p0();
        let b = beta_crit(&m, 0.5).unwrap();
        assert_abs_diff_eq!(b, 0.1575, epsilon = 1e-6);
        assert_abs_diff_eq!(m.lambda_sa * b * phi_bar_a(&m).unwrap(), 0.5, epsilon = 1e-15);
        assert_eq!(beta_crit(&m, 0.0).unwrap(), 0.0);
        let mut d = m.clone();
        d.lambda_sa = 2.0;
        assert_abs_diff_eq!(beta_crit(&d, 0.5).unwrap(), b / 2.0, epsilon = 1e-15);
    }

    #[test]
    fn stationary_susceptible_examples() {
        let m = p0();
        let (v, u) = stationary_susceptible(&m, 0.05, 0.5).unwrap();
        assert_eq!(u, 1);
        assert_abs_diff_eq!(v, -2.275132, epsilon = 1e-6);
        assert_eq!(stationary_susceptible(&m, 0.2, 0.5).unwrap(), (0.0, 0));
        let (v, u) = stationary_susceptible(&m, 0.0, 0.3).unwrap();
        assert_eq!(u, 1);
        assert_abs_diff_eq!(v, -3.0, epsilon = 1e-12);
        let bc = beta_crit(&m, 0.5).unwrap();
        assert_eq!(stationary_susceptible(&m, bc, 0.5).unwrap().1, 0);
    }

    #[test]
    fn rho_with_zero_beta_keeps_susceptibles() {
        let p = ModelParams::canonical();
        let t = TimeGrid::new(0.5, 200).unwrap();
        let path = integrate_rho(&p, t, &[vec![1.0; 201]], &[0.0; 201], &[[0.9, 0.1, 0.0, 0.0, 0.0]]).unwrap();
        for r in &path.rho[0] {
            assert_eq!(r[0], 0.9);
        }
        let last = path.rho[0][200];
        assert_abs_diff_eq!(last[3], 0.08, epsilon = 1e-6);
        assert_abs_diff_eq!(last[4], 0.02, epsilon = 1e-6);
    }

    #[test]
    fn branching_from_presymptomatic() {
        let p = ModelParams::canonical();
        let t = TimeGrid::new(1.0, 100).unwrap();
        let path = integrate_rho(&p, t, &[vec![0.0; 101]], &[0.3; 101], &[[0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
        let last = path.rho[0][100];
        assert_abs_diff_eq!(last[3], 0.8, epsilon = 1e-8);
        assert_abs_diff_eq!(last[4], 0.2, epsilon = 1e-8);
    }

    #[test]
    fn fo_mfe_alpha_limit() {
        let p = ModelParams::canonical();
        let t = TimeGrid::new(0.5, 200).unwrap();
        let eq = fo_mfe(&p, t, &[[0.9, 0.1, 0.0, 0.0, 0.0]]).unwrap();
        assert!(eq.mean_field.beta.iter().all(|&b| b == 0.0));
        assert_abs_diff_eq!(eq.mean_field.alpha[0], 0.9, epsilon = 1e-12);
        assert_abs_diff_eq!(*eq.mean_field.alpha.last().unwrap(), 0.98, epsilon = 1e-6);
        assert!(!eq.degenerate_alpha);
        let sol = &eq.solutions[0];
        assert_eq!(sol.policy, StatePolicy { s: 1, a: 0, i: 0 });
        assert_eq!(sol.regime, SusceptibleRegime::ActiveSusceptible);
    }

    #[test]
    fn fo_mfe_degenerate_and_pure_infected() {
        let p = ModelParams::canonical();
        let t = TimeGrid::new(0.5, 20).unwrap();
        let eq = fo_mfe(&p, t, &[[1.0, 0.0, 0.0, 0.0, 0.0]]).unwrap();
        assert!(eq.degenerate_alpha);
        let eq = fo_mfe(&p, t, &[[0.0, 1.0, 0.0, 0.0, 0.0]]).unwrap();
        for n in 0..t.n_nodes() {
            assert_abs_diff_eq!(eq.mean_field.alpha[n], eq.population.rho[0][n][3].max(1e-9), epsilon = 1e-15);
        }
    }

    #[test]
    fn fo_best_response_is_fixed_point() {
        let p = ModelParams::canonical();
        let t = TimeGrid::new(0.1, 300).unwrap();
        let eq = fo_mfe(&p, t, &[[0.9, 0.1, 0.0, 0.0, 0.0]]).unwrap();
        let (_, pol) = fo_best_response(&p.agent(0), &eq.mean_field).unwrap();
        assert!(pol.iter().all(|q| *q == StatePolicy { s: 1, a: 0, i: 0 }));
    }

    proptest! {
        #[test]
        fn stationary_hjb_residual(beta in 0.0..0.999f64, alpha in 0.001..0.999f64,
                                   lsa in 0.1..5.0f64, lai in 0.1..10.0f64, gamma in 0.01..1.0f64) {
            let mut m = p0();
            m.lambda_sa = lsa;
            m.lambda_ai = lai;
            m.gamma = gamma;
            let (v, u) = stationary_susceptible(&m, beta, alpha).unwrap();
            prop_assert!(stationary_susceptible_residual(&m, beta, alpha, v, u).unwrap() <= 1e-10);
            prop_assert!(v <= 0.0);
        }

        #[test]
        fn continuity_at_beta_crit(alpha in 0.01..0.99f64, lsa in 0.1..5.0f64) {
            let mut m = p0();
            m.lambda_sa = lsa;
            let bc = beta_crit(&m, alpha).unwrap();
            prop_assert!(active_susceptible_value(&m, bc, alpha).unwrap().abs() <= 1e-8);
            // The active branch is Lipschitz in beta with this constant near beta_crit.
            let lip = lsa * phi_bar_a(&m).unwrap() / (lsa * bc + m.gamma);
            let (lo, _) = stationary_susceptible(&m, bc - 1e-9, alpha).unwrap();
            let (hi, _) = stationary_susceptible(&m, bc + 1e-9, alpha).unwrap();
            prop_assert_eq!(hi, 0.0);
            prop_assert!(lo.abs() <= lip * 1e-9 * (1.0 + 1e-6) + 1e-15);
        }

        #[test]
        fn rho_conserves_probability(beta in 0.0..0.99f64, s in 0.0..1.0f64, frac in 0.0..1.0f64) {
            let p = ModelParams::canonical();
            let t = TimeGrid::new(0.25, 80).unwrap();
            let rho0 = [s, (1.0 - s) * frac, (1.0 - s) * (1.0 - frac), 0.0, 0.0];
            let path = integrate_rho(&p, t, &[vec![1.0; 81]], &vec![beta; 81], &[rho0]).unwrap();
            let mut prev_s = f64::INFINITY;
            for r in &path.rho[0] {
                prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-8);
                prop_assert!(r[0] <= prev_s + 1e-15);
                prev_s = r[0];
            }
        }
    }
}
