//! Forward evolution of the belief density of not-yet-symptomatic agents, the
//! symptomatic/removed compartments, and the induced mean-field terms.
//!
//! Densities live on the cells `[a_k, a_{k+1}]` of a [`BeliefGrid`]; policies
//! and drifts live on the nodes, which are the cell faces. Between nodes a
//! policy slice is read at the nearest node.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_advance, filter_drift};
use crate::grid::{BeliefGrid, PolicyField, TimeGrid};
use crate::mean_field::{interp, MeanFieldPath};
use crate::model::{AgentModel, ModelParams};

/// Cumulative negativity clip above which a run is aborted.
pub const CLIP_BUDGET: f64 = 1e-6;
/// Cumulative mass drift above which a run is aborted.
pub const MASS_DRIFT_TOL: f64 = 1e-8;

/// Belief density on grid cells plus the masses that have left it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeliefDensity {
    /// Density per unit belief on each cell.
    pub p: Vec<f64>,
    pub rho_i: f64,
    pub rho_r: f64,
    pub rho_d: f64,
}

impl BeliefDensity {
    pub fn belief_mass(&self, grid: &BeliefGrid) -> f64 {
        self.p.iter().sum::<f64>() * grid.da()
    }

    pub fn total_mass(&self, grid: &BeliefGrid) -> f64 {
        self.belief_mass(grid) + self.rho_i + self.rho_r + self.rho_d
    }

    /// `int a p da` with the density uniform on each cell.
    pub fn mean_belief_mass(&self, grid: &BeliefGrid) -> f64 {
        self.p.iter().enumerate().map(|(k, p)| p * grid.center(k)).sum::<f64>() * grid.da()
    }

    /// Truncated Gaussian bump on `[0, 1]` carrying `belief_mass`, with the
    /// remaining mass split as given over `(i, r, d)`.
    pub fn gaussian_bump(
        grid: &BeliefGrid,
        mean: f64,
        sd: f64,
        belief_mass: f64,
        rho_i: f64,
        rho_r: f64,
        rho_d: f64,
    ) -> Result<Self> {
        if !(sd > 0.0) || belief_mass < 0.0 {
            return Err(Error::InvalidInput(format!("bad bump: sd {sd}, mass {belief_mass}")));
        }
        let cdf = |a: f64| 0.5 * (1.0 + libm::erf((a - mean) / (sd * std::f64::consts::SQRT_2)));
        let z = cdf(1.0) - cdf(0.0);
        if !(z > 0.0) {
            return Err(Error::InvalidInput("bump has no mass on [0, 1]".into()));
        }
        let da = grid.da();
        let p =
            (0..grid.n_cells()).map(|k| belief_mass * (cdf(grid.node(k + 1)) - cdf(grid.node(k))) / (z * da)).collect();
        let d = Self { p, rho_i, rho_r, rho_d };
        d.validate(grid)?;
        Ok(d)
    }

    /// Uniform density on `[0, 1]` with the given mass.
    pub fn uniform(grid: &BeliefGrid, belief_mass: f64, rho_i: f64, rho_r: f64, rho_d: f64) -> Self {
        Self { p: vec![belief_mass; grid.n_cells()], rho_i, rho_r, rho_d }
    }

    pub fn validate(&self, grid: &BeliefGrid) -> Result<()> {
        if self.p.len() != grid.n_cells() {
            return Err(Error::GridMismatch(format!(
                "density has {} cells, grid has {}",
                self.p.len(),
                grid.n_cells()
            )));
        }
        if self.p.iter().chain([&self.rho_i, &self.rho_r, &self.rho_d]).any(|&x| !(x >= 0.0)) {
            return Err(Error::InvalidInput("density or compartment mass is negative".into()));
        }
        let total = self.total_mass(grid);
        if (total - 1.0).abs() > 1e-8 {
            return Err(Error::InvalidInput(format!("total mass {total} is not 1")));
        }
        Ok(())
    }
}

/// Drift of the filter at node `j` with the node's own control.
fn face_drift(grid: &BeliefGrid, j: usize, psi: &[f64], beta: f64, m: &AgentModel) -> f64 {
    filter_drift(grid.node(j), beta, psi[j], m)
}

/// Time step bound under which the upwind update keeps densities nonnegative.
pub fn positivity_limit(grid: &BeliefGrid, psi: &[f64], beta: f64, m: &AgentModel) -> f64 {
    let fmax = (0..grid.n_nodes()).map(|j| face_drift(grid, j, psi, beta, m).abs()).fold(0.0, f64::max);
    1.0 / (2.0 * fmax / grid.da() + m.lambda_ai)
}

/// Right-hand side of the upwind finite-volume FPK and the leak rate
/// `int lambda_ai a p da` into the symptomatic compartment.
pub fn fpk_rhs(p: &[f64], psi: &[f64], beta: f64, grid: &BeliefGrid, m: &AgentModel) -> (Vec<f64>, f64) {
    let nc = grid.n_cells();
    let da = grid.da();
    // Face fluxes; the outer faces carry none (p(0) = 0 and f(1) = 0).
    let mut flux = vec![0.0; nc + 1];
    for (j, fl) in flux.iter_mut().enumerate().take(nc).skip(1) {
        let f = face_drift(grid, j, psi, beta, m);
        *fl = if f > 0.0 { f * p[j - 1] } else { f * p[j] };
    }
    let mut leak = 0.0;
    let rhs = (0..nc)
        .map(|k| {
            let sink = m.lambda_ai * grid.center(k) * p[k];
            leak += sink * da;
            -(flux[k + 1] - flux[k]) / da - sink
        })
        .collect();
    (rhs, leak)
}

/// Result of one explicit finite-volume step.
#[derive(Debug, Clone, PartialEq)]
pub struct FpkStep {
    pub p: Vec<f64>,
    /// Mass moved to the symptomatic compartment during the step.
    pub leak: f64,
    /// Negative mass removed by clipping (and restored by rescaling).
    pub clipped: f64,
}

/// One explicit upwind step of length `dt`.
pub fn fpk_step(p: &[f64], psi: &[f64], beta: f64, dt: f64, grid: &BeliefGrid, m: &AgentModel) -> Result<FpkStep> {
    if p.len() != grid.n_cells() || psi.len() != grid.n_nodes() {
        return Err(Error::GridMismatch("density or policy slice does not match the grid".into()));
    }
    let limit = crate::hjb::cfl_limit(grid, beta, m);
    if dt > limit {
        return Err(Error::CflViolation { dt, limit });
    }
    let da = grid.da();
    let before: f64 = p.iter().sum::<f64>() * da;
    let (rhs, leak_rate) = fpk_rhs(p, psi, beta, grid, m);
    let mut next: Vec<f64> = p.iter().zip(&rhs).map(|(x, r)| x + dt * r).collect();
    let leak = leak_rate * dt;
    let mut clipped = 0.0;
    for x in &mut next {
        if *x < 0.0 {
            clipped -= *x * da;
            *x = 0.0;
        }
    }
    if clipped > 0.0 {
        let pos: f64 = next.iter().sum::<f64>() * da;
        if pos > 0.0 {
            let scale = (pos - clipped) / pos;
            next.iter_mut().for_each(|x| *x *= scale.max(0.0));
        }
        log::debug!("fpk step clipped {clipped:e} of negative mass");
    }
    let after: f64 = next.iter().sum::<f64>() * da;
    let drift = (after + leak - before).abs();
    if drift > MASS_DRIFT_TOL {
        return Err(Error::MassDriftExceeded { drift, tol: MASS_DRIFT_TOL });
    }
    Ok(FpkStep { p: next, leak, clipped })
}

/// Symptomatic and removed masses after a step with inflow `leak`.
///
/// The existing symptomatic mass decays exactly over `dt`; the removed part
/// is split in proportion to the recovery and death rates, and the inflow is
/// added at the end of the step.
pub fn compartment_step(state: &BeliefDensity, p_next: Vec<f64>, leak: f64, dt: f64, m: &AgentModel) -> BeliefDensity {
    let kappa = m.removal_rate();
    let kept = state.rho_i * (-kappa * dt).exp();
    let removed = state.rho_i - kept;
    let (to_r, to_d) =
        if kappa > 0.0 { (removed * m.lambda_ir / kappa, removed * m.lambda_id / kappa) } else { (0.0, 0.0) };
    BeliefDensity { p: p_next, rho_i: kept + leak, rho_r: state.rho_r + to_r, rho_d: state.rho_d + to_d }
}

/// Mass piecewise uniform between sorted faces `z` with masses `w`.
///
/// Returns `(int a psi, int psi)` where `psi` is the policy slice read at the
/// nearest node.
pub fn active_moments(z: &[f64], w: &[f64], psi: &[f64], grid: &BeliefGrid) -> (f64, f64) {
    let half = 0.5 * grid.da();
    let mut first = 0.0;
    let mut zeroth = 0.0;
    for (k, &wk) in w.iter().enumerate() {
        if wk == 0.0 {
            continue;
        }
        let (lo, hi) = (z[k], z[k + 1]);
        let width = hi - lo;
        if width <= 1e-300 {
            let u = psi[grid.nearest(lo)];
            first += u * wk * lo;
            zeroth += u * wk;
            continue;
        }
        let (j0, j1) = (grid.nearest(lo), grid.nearest(hi));
        for (j, &u) in psi.iter().enumerate().take(j1 + 1).skip(j0) {
            if u == 0.0 {
                continue;
            }
            let a0 = lo.max(grid.node(j) - half);
            let a1 = hi.min(grid.node(j) + half);
            if a1 <= a0 {
                continue;
            }
            let mass = wk * (a1 - a0) / width;
            first += u * mass * 0.5 * (a0 + a1);
            zeroth += u * mass;
        }
    }
    (first, zeroth)
}

/// `beta = sum_theta p(theta) int a psi p da` and
/// `alpha = sum_theta p(theta) (rho_r + int psi p da)`.
pub fn aggregate_mean_field(
    states: &[BeliefDensity],
    psi: &[&[f64]],
    weights: &[f64],
    grid: &BeliefGrid,
) -> Result<(f64, f64)> {
    if states.len() != psi.len() || states.len() != weights.len() {
        return Err(Error::InvalidInput("attribute counts differ".into()));
    }
    let z = grid.nodes();
    let mut beta = 0.0;
    let mut alpha = 0.0;
    for ((s, q), w) in states.iter().zip(psi).zip(weights) {
        let masses: Vec<f64> = s.p.iter().map(|x| x * grid.da()).collect();
        let (first, zeroth) = active_moments(&z, &masses, q, grid);
        beta += w * first;
        alpha += w * (s.rho_r + zeroth);
    }
    Ok((beta, alpha))
}

/// Lagrangian representation: sub-cells with moving faces and uniform density.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristic {
    pub z: Vec<f64>,
    pub w: Vec<f64>,
}

impl Characteristic {
    /// Split every grid cell into `refinement` equal sub-cells.
    pub fn from_density(p: &[f64], grid: &BeliefGrid, refinement: usize) -> Self {
        let r = refinement.max(1);
        let da = grid.da();
        let n = grid.n_cells() * r;
        let z = (0..=n).map(|i| if i == n { 1.0 } else { i as f64 * da / r as f64 }).collect();
        let w = p.iter().flat_map(|&x| std::iter::repeat_n(x * da / r as f64, r)).collect();
        Self { z, w }
    }

    pub fn mass(&self) -> f64 {
        self.w.iter().sum()
    }

    /// Advance faces along the filter over `[t, t + dt]` and decay masses by
    /// the a -> i hazard at the mean belief of each sub-cell. Returns the leak.
    pub fn step(
        &mut self,
        m: &AgentModel,
        psi: &[f64],
        grid: &BeliefGrid,
        beta: &impl Fn(f64) -> f64,
        t: f64,
        dt: f64,
    ) -> Result<f64> {
        let f = |s: f64, a: f64| filter_drift(a, beta(s), psi[grid.nearest(a)], m);
        let mut z_new = Vec::with_capacity(self.z.len());
        for &zk in &self.z {
            z_new.push(filter_advance(zk, t, dt, &f)?.clamp(0.0, 1.0));
        }
        for k in 1..z_new.len() {
            if z_new[k] < z_new[k - 1] {
                z_new[k] = z_new[k - 1];
            }
        }
        let mut leak = 0.0;
        for k in 0..self.w.len() {
            let mid = 0.25 * (self.z[k] + self.z[k + 1] + z_new[k] + z_new[k + 1]);
            let kept = self.w[k] * (-m.lambda_ai * mid * dt).exp();
            leak += self.w[k] - kept;
            self.w[k] = kept;
        }
        self.z = z_new;
        Ok(leak)
    }

    /// Cell densities on `grid` from exact overlap of sub-cells with cells.
    pub fn project(&self, grid: &BeliefGrid) -> Vec<f64> {
        let da = grid.da();
        let mut mass = vec![0.0; grid.n_cells()];
        for (k, &wk) in self.w.iter().enumerate() {
            if wk == 0.0 {
                continue;
            }
            let (lo, hi) = (self.z[k], self.z[k + 1]);
            let width = hi - lo;
            let (c0, c1) = (grid.cell_of(lo), grid.cell_of(hi));
            if width <= 1e-300 || c0 == c1 {
                mass[c0] += wk;
                continue;
            }
            let mut assigned = 0.0;
            for (c, slot) in mass.iter_mut().enumerate().take(c1 + 1).skip(c0) {
                let a0 = lo.max(grid.node(c));
                let a1 = hi.min(grid.node(c + 1));
                if a1 > a0 {
                    let part = if c == c1 { wk - assigned } else { wk * (a1 - a0) / width };
                    *slot += part;
                    assigned += part;
                }
            }
        }
        mass.into_iter().map(|x| x / da).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum FpkScheme {
    /// Explicit first-order upwind finite volumes.
    Upwind,
    /// Faces transported along filter characteristics; each grid cell is
    /// split into `refinement` sub-cells.
    Characteristic { refinement: usize },
}

impl Default for FpkScheme {
    fn default() -> Self {
        FpkScheme::Characteristic { refinement: 4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PropagationOptions {
    pub scheme: FpkScheme,
    /// Largest internal step.
    pub dt_max: f64,
    /// Keep every density slice (otherwise only the first and last).
    pub keep_densities: bool,
}

impl Default for PropagationOptions {
    fn default() -> Self {
        Self { scheme: FpkScheme::default(), dt_max: 5e-3, keep_densities: true }
    }
}

/// Output of [`propagate_population`].
#[derive(Debug, Clone)]
pub struct Propagation {
    pub time: TimeGrid,
    pub grid: BeliefGrid,
    /// `densities[theta][n]`; only the endpoints when slices are not kept.
    pub densities: Vec<Vec<BeliefDensity>>,
    /// Aggregated `(beta, alpha)`, clamped into the admissible box.
    pub mean_field: MeanFieldPath,
    pub raw_beta: Vec<f64>,
    pub raw_alpha: Vec<f64>,
    /// Largest `|total mass - initial total mass|` over nodes and attributes.
    pub max_mass_drift: f64,
    /// Cumulative clipped negative mass.
    pub clipped: f64,
}

impl Propagation {
    /// Density of attribute `theta` at node `n` when slices are kept.
    pub fn density(&self, theta: usize, n: usize) -> &BeliefDensity {
        &self.densities[theta][n]
    }
}

enum State {
    Grid(Vec<f64>),
    Lagrange(Characteristic),
}

/// March the belief density and compartments forward under `psi`.
///
/// `drift_beta` supplies the activity level used in the filter drift; when it
/// is `None` the level produced by the population itself at the start of each
/// internal step is used.
pub fn propagate_population(
    params: &ModelParams,
    psi: &[PolicyField],
    init: &[BeliefDensity],
    grid: &BeliefGrid,
    drift_beta: Option<&MeanFieldPath>,
    opts: PropagationOptions,
) -> Result<Propagation> {
    let agents = params.agents();
    if psi.len() != agents.len() || init.len() != agents.len() {
        return Err(Error::InvalidInput(format!(
            "expected {} attribute classes, got {} policies / {} densities",
            agents.len(),
            psi.len(),
            init.len()
        )));
    }
    let time = psi[0].time;
    for q in psi {
        if q.time != time || q.belief != *grid {
            return Err(Error::GridMismatch("policy fields must share the time and belief grids".into()));
        }
    }
    if let Some(mf) = drift_beta {
        if mf.time != time {
            return Err(Error::GridMismatch("drift path and policy use different time grids".into()));
        }
    }
    for d in init {
        d.validate(grid)?;
    }
    let weights: Vec<f64> = agents.iter().map(|m| m.weight).collect();
    let da = grid.da();

    let mut states: Vec<State> = init
        .iter()
        .map(|d| match opts.scheme {
            FpkScheme::Upwind => State::Grid(d.p.clone()),
            FpkScheme::Characteristic { refinement } => {
                State::Lagrange(Characteristic::from_density(&d.p, grid, refinement))
            }
        })
        .collect();
    let mut comps: Vec<BeliefDensity> = init.to_vec();
    let initial_total: Vec<f64> = init.iter().map(|d| d.total_mass(grid)).collect();

    let aggregate = |states: &[State], comps: &[BeliefDensity], n: usize| -> (f64, f64) {
        let mut beta = 0.0;
        let mut alpha = 0.0;
        for (k, s) in states.iter().enumerate() {
            let slice = psi[k].slice(n);
            let (first, zeroth) = match s {
                State::Grid(p) => {
                    let masses: Vec<f64> = p.iter().map(|x| x * da).collect();
                    active_moments(&grid.nodes(), &masses, slice, grid)
                }
                State::Lagrange(c) => active_moments(&c.z, &c.w, slice, grid),
            };
            beta += weights[k] * first;
            alpha += weights[k] * (comps[k].rho_r + zeroth);
        }
        (beta, alpha)
    };
    let snapshot = |states: &[State], comps: &[BeliefDensity]| -> Vec<BeliefDensity> {
        states
            .iter()
            .zip(comps)
            .map(|(s, c)| BeliefDensity {
                p: match s {
                    State::Grid(p) => p.clone(),
                    State::Lagrange(l) => l.project(grid),
                },
                ..c.clone()
            })
            .collect()
    };
    let belief_mass = |s: &State| match s {
        State::Grid(p) => p.iter().sum::<f64>() * da,
        State::Lagrange(l) => l.mass(),
    };

    let mut raw_beta = Vec::with_capacity(time.n_nodes());
    let mut raw_alpha = Vec::with_capacity(time.n_nodes());
    let mut densities: Vec<Vec<BeliefDensity>> = vec![Vec::new(); agents.len()];
    let mut max_drift: f64 = 0.0;
    let mut clipped = 0.0;

    let (b0, a0) = aggregate(&states, &comps, 0);
    raw_beta.push(b0);
    raw_alpha.push(a0);
    for (k, d) in snapshot(&states, &comps).into_iter().enumerate() {
        densities[k].push(d);
    }

    for n in 0..time.n_steps {
        let t0 = time.t(n);
        let mut nsub = (time.dt / opts.dt_max).ceil().max(1.0) as usize;
        if let FpkScheme::Upwind = opts.scheme {
            let bmax = match drift_beta {
                Some(mf) => mf.beta[n].max(mf.beta[n + 1]),
                None => 1.0,
            };
            for (k, m) in agents.iter().enumerate() {
                let lim =
                    0.9 * positivity_limit(grid, psi[k].slice(n), bmax, m).min(crate::hjb::cfl_limit(grid, bmax, m));
                nsub = nsub.max((time.dt / lim).ceil() as usize);
            }
        }
        let h = time.dt / nsub as f64;
        for s in 0..nsub {
            let t = t0 + s as f64 * h;
            let frozen = match drift_beta {
                Some(_) => 0.0,
                None => aggregate(&states, &comps, n).0,
            };
            let beta_fn = |tt: f64| match drift_beta {
                Some(mf) => interp(&mf.time, &mf.beta, tt),
                None => frozen,
            };
            for (k, m) in agents.iter().enumerate() {
                let slice = psi[k].slice(n);
                let leak = match &mut states[k] {
                    State::Grid(p) => {
                        let step = fpk_step(p, slice, beta_fn(t), h, grid, m)?;
                        clipped += step.clipped * weights[k];
                        *p = step.p;
                        step.leak
                    }
                    State::Lagrange(l) => l.step(m, slice, grid, &beta_fn, t, h)?,
                };
                let c = &comps[k];
                let next = compartment_step(c, Vec::new(), leak, h, m);
                comps[k] = next;
            }
        }
        if clipped > CLIP_BUDGET {
            return Err(Error::ClipBudgetExceeded { clipped, limit: CLIP_BUDGET });
        }
        for (k, s) in states.iter().enumerate() {
            let c = &comps[k];
            let total = belief_mass(s) + c.rho_i + c.rho_r + c.rho_d;
            max_drift = max_drift.max((total - initial_total[k]).abs());
        }
        if max_drift > MASS_DRIFT_TOL {
            return Err(Error::MassDriftExceeded { drift: max_drift, tol: MASS_DRIFT_TOL });
        }
        let (b, a) = aggregate(&states, &comps, n + 1);
        raw_beta.push(b);
        raw_alpha.push(a);
        if opts.keep_densities || n + 1 == time.n_steps {
            for (k, d) in snapshot(&states, &comps).into_iter().enumerate() {
                densities[k].push(d);
            }
        }
    }
    let (mean_field, _) = MeanFieldPath::clamped(time, raw_beta.clone(), raw_alpha.clone())?;
    Ok(Propagation {
        time,
        grid: *grid,
        densities,
        mean_field,
        raw_beta,
        raw_alpha,
        max_mass_drift: max_drift,
        clipped,
    })
}

/// Kolmogorov-Smirnov distance between a belief sample and a cell density,
/// both normalized to unit mass, evaluated at the grid faces.
pub fn ks_at_faces(sample: &[f64], p: &[f64], grid: &BeliefGrid) -> Result<f64> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    let total: f64 = p.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidInput("density has no mass".into()));
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut cum = 0.0;
    let mut ks: f64 = 0.0;
    let mut idx = 0;
    for j in 1..grid.n_nodes() {
        cum += p[j - 1];
        let face = grid.node(j);
        while idx < sorted.len() && sorted[idx] <= face {
            idx += 1;
        }
        ks = ks.max((cum / total - idx as f64 / n).abs());
    }
    Ok(ks)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::integrate_filter;
    use crate::grid::Field;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn p0() -> AgentModel {
        ModelParams::canonical().agent(0)
    }

    fn bump(g: &BeliefGrid, mean: f64, sd: f64) -> BeliefDensity {
        BeliefDensity::gaussian_bump(g, mean, sd, 1.0, 0.0, 0.0, 0.0).unwrap()
    }

    #[test]
    fn isolating_step_conserves_mass() {
        let m = p0();
        let g = BeliefGrid::new(101).unwrap();
        let d = bump(&g, 0.6, 0.1);
        let psi = vec![0.0; 101];
        let dt = 0.5 * positivity_limit(&g, &psi, 0.3, &m);
        let s = fpk_step(&d.p, &psi, 0.3, dt, &g, &m).unwrap();
        let after: f64 = s.p.iter().sum::<f64>() * g.da();
        assert!((after + s.leak - d.belief_mass(&g)).abs() <= 1e-10);
        assert_eq!(s.clipped, 0.0);
    }

    #[test]
    fn leak_near_one() {
        let m = p0();
        let g = BeliefGrid::new(201).unwrap();
        let mut p = vec![0.0; 200];
        p[199] = 1.0 / g.da();
        let dt = 1e-4;
        let s = fpk_step(&p, &vec![0.0; 201], 0.0, dt, &g, &m).unwrap();
        assert_abs_diff_eq!(s.leak / dt, m.lambda_ai, epsilon = m.lambda_ai * g.da());
    }

    #[test]
    fn rightward_transport_matches_filter() {
        let m = p0();
        let g = BeliefGrid::new(401).unwrap();
        let d = bump(&g, 0.1, 0.02);
        let psi = vec![1.0; 401];
        let beta = 0.5;
        let dt = 0.5 * positivity_limit(&g, &psi, beta, &m);
        let mut p = d.p.clone();
        let steps = 200;
        for _ in 0..steps {
            p = fpk_step(&p, &psi, beta, dt, &g, &m).unwrap().p;
        }
        let mass: f64 = p.iter().sum::<f64>();
        let com: f64 = p.iter().enumerate().map(|(k, x)| x * g.center(k)).sum::<f64>() / mass;
        let com0 = d.mean_belief_mass(&g) / d.belief_mass(&g);
        let t = TimeGrid::new(dt, steps).unwrap();
        let path = integrate_filter(&m, com0, t, |_| beta, |_, _| 1.0).unwrap();
        // The sink removes high beliefs faster, so allow the spread-induced bias.
        assert!((com - path.a[steps]).abs() < 5e-3, "{com} vs {}", path.a[steps]);
        assert!(com > com0);
    }

    #[test]
    fn compartment_examples() {
        let m = p0();
        let s = BeliefDensity { p: vec![], rho_i: 1.0, rho_r: 0.0, rho_d: 0.0 };
        let dt = 1e-6;
        let n = compartment_step(&s, vec![], 0.0, dt, &m);
        assert_abs_diff_eq!((n.rho_i - 1.0) / dt, -0.5, epsilon = 1e-5);
        assert_abs_diff_eq!(n.rho_r / dt, 0.4, epsilon = 1e-5);
        assert_abs_diff_eq!(n.rho_d / dt, 0.1, epsilon = 1e-5);
        let z = BeliefDensity { p: vec![], rho_i: 0.0, rho_r: 0.0, rho_d: 0.0 };
        assert_eq!(compartment_step(&z, vec![], 0.3, 0.1, &m).rho_i, 0.3);
        let mut c = z.clone();
        for _ in 0..20_000 {
            c = compartment_step(&c, vec![], 0.2 * 1e-3, 1e-3, &m);
        }
        assert_abs_diff_eq!(c.rho_i, 0.2 / 0.5, epsilon = 1e-3);
    }

    #[test]
    fn aggregate_examples() {
        let g = BeliefGrid::new(101).unwrap();
        let u = BeliefDensity::uniform(&g, 1.0, 0.0, 0.0, 0.0);
        let ones = vec![1.0; 101];
        let (b, a) = aggregate_mean_field(std::slice::from_ref(&u), &[&ones], &[1.0], &g).unwrap();
        assert_abs_diff_eq!(b, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(a, 1.0, epsilon = 1e-12);
        let zeros = vec![0.0; 101];
        let s = BeliefDensity { rho_r: 0.2, ..BeliefDensity::uniform(&g, 0.8, 0.0, 0.2, 0.0) };
        let (b, a) = aggregate_mean_field(&[s], &[&zeros], &[1.0], &g).unwrap();
        assert_eq!(b, 0.0);
        assert_abs_diff_eq!(a, 0.2, epsilon = 1e-15);
        let thr: Vec<f64> = g.nodes().iter().map(|&a| if a < 0.3 - 1e-12 { 1.0 } else { 0.0 }).collect();
        let (b, _) = aggregate_mean_field(&[u], &[&thr], &[1.0], &g).unwrap();
        assert_abs_diff_eq!(b, 0.3f64.powi(2) / 2.0, epsilon = 0.3 * g.da());
    }

    #[test]
    fn characteristic_projection_preserves_mass() {
        let g = BeliefGrid::new(51).unwrap();
        let d = bump(&g, 0.4, 0.15);
        let c = Characteristic::from_density(&d.p, &g, 3);
        let back = c.project(&g);
        for (x, y) in back.iter().zip(&d.p) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn characteristic_mass_exact() {
        let m = p0();
        let g = BeliefGrid::new(101).unwrap();
        let d = bump(&g, 0.5, 0.1);
        let mut c = Characteristic::from_density(&d.p, &g, 4);
        let psi: Vec<f64> = g.nodes().iter().map(|&a| f64::from(a < 0.3)).collect();
        let m0 = c.mass();
        let mut leak = 0.0;
        for s in 0..100 {
            leak += c.step(&m, &psi, &g, &|_| 0.05, s as f64 * 0.01, 0.01).unwrap();
        }
        assert!((c.mass() + leak - m0).abs() < 1e-14);
        assert!(c.z.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn no_activity_means_no_beta() {
        let p = ModelParams::canonical();
        let g = BeliefGrid::new(101).unwrap();
        let t = TimeGrid::new(0.05, 60).unwrap();
        let psi = Field::filled(t, g, 0.0);
        let init = bump(&g, 0.5, 0.1);
        for scheme in [FpkScheme::Upwind, FpkScheme::default()] {
            let opts = PropagationOptions { scheme, ..Default::default() };
            let out = propagate_population(&p, std::slice::from_ref(&psi), std::slice::from_ref(&init), &g, None, opts)
                .unwrap();
            assert!(out.raw_beta.iter().all(|&b| b == 0.0));
            let masses: Vec<f64> = out.densities[0].iter().map(|d| d.mean_belief_mass(&g)).collect();
            assert!(masses.windows(2).all(|w| w[1] <= w[0] + 1e-15));
            assert!(out.max_mass_drift <= 1e-8);
            // Nothing crosses a = 1.
            assert!(out.densities[0].iter().all(|d| d.p.iter().all(|x| x.is_finite())));
        }
    }

    #[test]
    fn ks_examples() {
        let g = BeliefGrid::new(11).unwrap();
        let u = vec![1.0; 10];
        let sample: Vec<f64> = (0..1000).map(|i| (i as f64 + 0.5) / 1000.0).collect();
        assert!(ks_at_faces(&sample, &u, &g).unwrap() < 1e-3);
        assert!(ks_at_faces(&[0.95; 10], &u, &g).unwrap() > 0.85);
        assert!(matches!(ks_at_faces(&[], &u, &g), Err(Error::EmptySample)));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn upwind_positive_and_conservative(mean in 0.1..0.9f64, sd in 0.03..0.3f64, beta in 0.0..0.9f64,
                                             th in 0.0..1.0f64) {
            let m = p0();
            let g = BeliefGrid::new(81).unwrap();
            let d = bump(&g, mean, sd);
            let psi: Vec<f64> = g.nodes().iter().map(|&a| f64::from(a < th)).collect();
            let dt = 0.9 * positivity_limit(&g, &psi, beta, &m).min(crate::hjb::cfl_limit(&g, beta, &m));
            let mut state = d.clone();
            let total0 = state.total_mass(&g);
            for _ in 0..200 {
                let s = fpk_step(&state.p, &psi, beta, dt, &g, &m).unwrap();
                prop_assert_eq!(s.clipped, 0.0);
                let prev_r = state.rho_r;
                state = compartment_step(&state, s.p, s.leak, dt, &m);
                prop_assert!(state.rho_r >= prev_r);
                prop_assert!(state.p.iter().all(|&x| x >= 0.0));
            }
            prop_assert!((state.total_mass(&g) - total0).abs() <= 1e-10);
        }

        #[test]
        fn discrete_duality(beta in 0.0..0.9f64, th in 0.0..1.0f64) {
            // <A v, p> - <v, A' p> for the belief part; A v = f v' - lambda a v + lambda a v(i).
            let m = p0();
            let err = |n: usize| {
                let g = BeliefGrid::new(n).unwrap();
                let psi: Vec<f64> = g.nodes().iter().map(|&a| f64::from(a < th)).collect();
                let d = bump(&g, 0.5, 0.15);
                let (rhs, leak) = fpk_rhs(&d.p, &psi, beta, &g, &m);
                let v = |a: f64| (3.0 * a).sin();
                let dv = |a: f64| 3.0 * (3.0 * a).cos();
                let vi = 0.7;
                let da = g.da();
                let mut lhs = 0.0;
                let mut rhs_pair = vi * leak;
                for (k, (&pk, &rk)) in d.p.iter().zip(&rhs).enumerate() {
                    let c = g.center(k);
                    let u = psi[g.nearest(c)];
                    let f = filter_drift(c, beta, u, &m);
                    lhs += (f * dv(c) - m.lambda_ai * c * v(c) + m.lambda_ai * c * vi) * pk * da;
                    rhs_pair += v(c) * rk * da;
                }
                (lhs - rhs_pair).abs()
            };
            let (e1, e2) = (err(101), err(401));
            prop_assert!(e2 <= e1 * 0.5 + 1e-3, "{} {}", e1, e2);
            prop_assert!(e2 <= 0.05);
        }
    }
}
