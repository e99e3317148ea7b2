//! Agent-based simulation of the partially observed population: true states
//! jump at their rates while each agent runs its own filter and plays its
//! feedback policy. Used as an independent check on the density solver.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{filter_advance, filter_drift};
use crate::fpk::{ks_at_faces, BeliefDensity};
use crate::grid::{BeliefGrid, PolicyField};
use crate::mean_field::{interp, MeanFieldPath};
use crate::model::{AgentModel, EpiState, ModelParams};

/// Largest per-step jump probability accepted.
pub const MAX_JUMP_PROB: f64 = 0.1;

const CHUNK: usize = 4096;

#[derive(Debug, Clone)]
pub struct Agent {
    pub id: u64,
    pub theta: usize,
    pub state: EpiState,
    /// Filter output; frozen once symptoms appear.
    pub belief: f64,
    rng: ChaCha8Rng,
}

impl Agent {
    /// Policy input: zero once the agent knows it is infected.
    fn control(&self, psi: &[f64], grid: &BeliefGrid) -> f64 {
        match self.state {
            EpiState::S | EpiState::A => psi[grid.nearest(self.belief)],
            EpiState::R => 1.0,
            EpiState::I | EpiState::D => 0.0,
        }
    }

    fn observes_nothing(&self) -> bool {
        matches!(self.state, EpiState::S | EpiState::A)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// Activity level read from the supplied mean-field path.
    Exogenous,
    /// Activity level recomputed from the previous step's population.
    SelfConsistent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub n_agents: usize,
    pub seed: u64,
    /// Requested step; the actual step divides the horizon evenly.
    pub dt_sim: f64,
    pub mode: SimMode,
    /// Record the aggregate series every this many steps.
    #[serde(default = "default_record_every")]
    pub record_every: usize,
    /// Times at which belief samples of symptom-free agents are kept.
    #[serde(default)]
    pub sample_times: Vec<f64>,
}

fn default_record_every() -> usize {
    1
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            return Err(Error::InvalidInput("n_agents must be positive".into()));
        }
        if !(self.dt_sim > 0.0) || !self.dt_sim.is_finite() {
            return Err(Error::InvalidInput(format!("dt_sim must be positive, got {}", self.dt_sim)));
        }
        if self.record_every == 0 {
            return Err(Error::InvalidInput("record_every must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the aggregate series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimRecord {
    pub t: f64,
    pub beta_hat: f64,
    pub alpha_hat: f64,
    /// Fractions in `s, a, i, r, d` order.
    pub fractions: [f64; 5],
}

/// Beliefs of agents not yet symptomatic, per attribute, at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct BeliefSample {
    pub t: f64,
    pub beliefs: Vec<Vec<f64>>,
    /// Agent ids matching `beliefs`.
    pub ids: Vec<Vec<u64>>,
    /// Fractions in `s, a, i, r, d` order, per attribute (relative to the
    /// attribute's own population).
    pub fractions: Vec<[f64; 5]>,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub dt: f64,
    pub records: Vec<SimRecord>,
    pub samples: Vec<BeliefSample>,
    /// Agents in each attribute class.
    pub class_sizes: Vec<usize>,
}

/// Draw an initial population: attribute by weight, then compartment by mass,
/// belief uniformly within a cell drawn by mass, and presymptomatic with
/// probability equal to the belief.
fn spawn(id: u64, seed: u64, params: &ModelParams, init: &[BeliefDensity], grid: &BeliefGrid) -> Agent {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    let agents_w: Vec<f64> = params.attributes.iter().map(|a| a.weight).collect();
    let theta = pick(&mut rng, &agents_w);
    let d = &init[theta];
    let da = grid.da();
    let masses: Vec<f64> = d.p.iter().map(|x| x * da).chain([d.rho_i, d.rho_r, d.rho_d]).collect();
    let k = pick(&mut rng, &masses);
    let nc = grid.n_cells();
    let (state, belief) = if k < nc {
        let a = grid.node(k) + rng.gen::<f64>() * da;
        let a = a.min(1.0);
        let state = if rng.gen::<f64>() < a { EpiState::A } else { EpiState::S };
        (state, a)
    } else {
        ([EpiState::I, EpiState::R, EpiState::D][k - nc], 1.0)
    };
    Agent { id, theta, state, belief, rng }
}

fn pick(rng: &mut ChaCha8Rng, w: &[f64]) -> usize {
    let total: f64 = w.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, &x) in w.iter().enumerate() {
        if u < x {
            return k;
        }
        u -= x;
    }
    w.iter().rposition(|&x| x > 0.0).unwrap_or(0)
}

/// Jump probability over `dt` at rate `r`.
#[inline]
fn jump_prob(r: f64, dt: f64) -> f64 {
    -(-r * dt).exp_m1()
}

/// Ordered sums over fixed chunks, independent of the thread count.
fn ordered_sum<T: Sync>(items: &[T], f: impl Fn(&T) -> [f64; 7] + Sync) -> [f64; 7] {
    let parts: Vec<[f64; 7]> = items
        .par_chunks(CHUNK)
        .map(|c| {
            let mut acc = [0.0; 7];
            for x in c {
                let v = f(x);
                for (a, b) in acc.iter_mut().zip(v) {
                    *a += b;
                }
            }
            acc
        })
        .collect();
    let mut acc = [0.0; 7];
    for p in parts {
        for (a, b) in acc.iter_mut().zip(p) {
            *a += b;
        }
    }
    acc
}

/// Simulate `cfg.n_agents` agents over the horizon of `psi`.
///
/// `mf` supplies the activity level in exogenous mode and is ignored in
/// self-consistent mode.
pub fn simulate(
    params: &ModelParams,
    psi: &[PolicyField],
    init: &[BeliefDensity],
    mf: Option<&MeanFieldPath>,
    cfg: &SimConfig,
) -> Result<SimOutput> {
    cfg.validate()?;
    let models: Vec<AgentModel> = params.agents();
    if psi.len() != models.len() || init.len() != models.len() {
        return Err(Error::InvalidInput("one policy and one initial density per attribute".into()));
    }
    let time = psi[0].time;
    let grid = psi[0].belief;
    if psi.iter().any(|q| q.time != time || q.belief != grid) {
        return Err(Error::GridMismatch("policy fields must share grids".into()));
    }
    for d in init {
        d.validate(&grid)?;
    }
    let exo = match (&cfg.mode, mf) {
        (SimMode::Exogenous, Some(mf)) => Some(mf),
        (SimMode::Exogenous, None) => return Err(Error::InvalidInput("exogenous mode needs a mean-field path".into())),
        (SimMode::SelfConsistent, _) => None,
    };
    let horizon = time.horizon();
    let n_steps = (horizon / cfg.dt_sim).ceil().max(1.0) as usize;
    let dt = horizon / n_steps as f64;

    let beta_max = exo.map_or(1.0, |m| m.beta.iter().cloned().fold(0.0, f64::max));
    let max_prob = models
        .iter()
        .flat_map(|m| [m.lambda_sa * beta_max, m.lambda_ai, m.removal_rate()])
        .map(|r| jump_prob(r, dt))
        .fold(0.0, f64::max);
    if max_prob > MAX_JUMP_PROB {
        return Err(Error::StepTooCoarse { max_prob });
    }

    let mut agents: Vec<Agent> =
        (0..cfg.n_agents as u64).into_par_iter().map(|id| spawn(id, cfg.seed, params, init, &grid)).collect();
    let mut class_sizes = vec![0; models.len()];
    for a in &agents {
        class_sizes[a.theta] += 1;
    }
    let n = cfg.n_agents as f64;
    let mut sample_steps: Vec<(usize, f64)> =
        cfg.sample_times.iter().map(|&t| (((t / dt).round().max(0.0) as usize).min(n_steps), t)).collect();
    sample_steps.sort_by_key(|s| s.0);

    let slice_at = |t: f64| time.interval(t);
    let tally = |agents: &[Agent], k: usize| -> [f64; 7] {
        ordered_sum(agents, |a| {
            let u = a.control(psi[a.theta].slice(k), &grid);
            let mut v = [0.0; 7];
            v[a.state.index()] = 1.0;
            if a.state == EpiState::A {
                v[5] = u;
            }
            if a.state != EpiState::D && a.state != EpiState::I {
                v[6] = u;
            }
            v
        })
    };
    let record = |agents: &[Agent], step: usize| -> SimRecord {
        let t = step as f64 * dt;
        let k = if step == n_steps { time.n_steps } else { slice_at(t + 0.5 * dt) };
        let s = tally(agents, k);
        SimRecord {
            t,
            beta_hat: s[5] / n,
            alpha_hat: s[6] / n,
            fractions: [s[0] / n, s[1] / n, s[2] / n, s[3] / n, s[4] / n],
        }
    };
    let sample = |agents: &[Agent], t: f64| -> BeliefSample {
        let mut beliefs = vec![Vec::new(); models.len()];
        let mut ids = vec![Vec::new(); models.len()];
        let mut counts = vec![[0.0; 5]; models.len()];
        for a in agents {
            if a.observes_nothing() {
                beliefs[a.theta].push(a.belief);
                ids[a.theta].push(a.id);
            }
            counts[a.theta][a.state.index()] += 1.0;
        }
        let fractions = counts
            .into_iter()
            .zip(&class_sizes)
            .map(|(c, &sz)| c.map(|x| if sz > 0 { x / sz as f64 } else { 0.0 }))
            .collect();
        BeliefSample { t, beliefs, ids, fractions }
    };

    let mut records = Vec::new();
    let mut samples = Vec::new();
    let mut next_sample = 0;
    let mut beta_hat = 0.0;
    for step in 0..=n_steps {
        while next_sample < sample_steps.len() && sample_steps[next_sample].0 == step {
            samples.push(sample(&agents, sample_steps[next_sample].1));
            next_sample += 1;
        }
        if step % cfg.record_every == 0 || step == n_steps {
            let r = record(&agents, step);
            beta_hat = r.beta_hat;
            records.push(r);
        } else if exo.is_none() {
            beta_hat = record(&agents, step).beta_hat;
        }
        if step == n_steps {
            break;
        }
        let t = step as f64 * dt;
        let k = slice_at(t + 0.5 * dt);
        let frozen = beta_hat;
        let beta_fn = |s: f64| match exo {
            Some(mf) => interp(&mf.time, &mf.beta, s),
            None => frozen,
        };
        let beta_mid = beta_fn(t + 0.5 * dt);
        let failure: Option<Error> = agents
            .par_chunks_mut(CHUNK)
            .map(|chunk| {
                for a in chunk.iter_mut() {
                    if let Err(e) =
                        advance(a, &models[a.theta], psi[a.theta].slice(k), &grid, &beta_fn, beta_mid, t, dt)
                    {
                        return Some(e);
                    }
                }
                None
            })
            .reduce(|| None, |x, y| x.or(y));
        if let Some(e) = failure {
            return Err(e);
        }
    }
    Ok(SimOutput { dt, records, samples, class_sizes })
}

#[allow(clippy::too_many_arguments)]
fn advance(
    a: &mut Agent,
    m: &AgentModel,
    psi: &[f64],
    grid: &BeliefGrid,
    beta: &impl Fn(f64) -> f64,
    beta_mid: f64,
    t: f64,
    dt: f64,
) -> Result<()> {
    let u = a.control(psi, grid);
    let draw: f64 = a.rng.gen();
    match a.state {
        EpiState::S => {
            if draw < jump_prob(m.lambda_sa * beta_mid * u, dt) {
                a.state = EpiState::A;
            }
        }
        EpiState::A => {
            if draw < jump_prob(m.lambda_ai, dt) {
                a.state = EpiState::I;
            }
        }
        EpiState::I => {
            let kappa = m.removal_rate();
            if draw < jump_prob(kappa, dt) {
                a.state = if a.rng.gen::<f64>() * kappa < m.lambda_ir { EpiState::R } else { EpiState::D };
            }
        }
        EpiState::R | EpiState::D => {}
    }
    if a.observes_nothing() {
        let f = |s: f64, x: f64| filter_drift(x, beta(s), psi[grid.nearest(x)], m);
        a.belief = filter_advance(a.belief, t, dt, &f)?;
    }
    Ok(())
}

/// Distances between a simulation snapshot and a density solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleMetrics {
    pub t: f64,
    pub ks: f64,
    pub err_i: f64,
    pub err_r: f64,
    pub err_d: f64,
}

impl OracleMetrics {
    pub fn max_compartment_error(&self) -> f64 {
        self.err_i.max(self.err_r).max(self.err_d)
    }
}

/// Compare belief samples and compartment fractions of one attribute class
/// with the density solution at the same time.
pub fn compare_to_fpk(
    t: f64,
    beliefs: &[f64],
    fractions: &[f64; 5],
    d: &BeliefDensity,
    grid: &BeliefGrid,
) -> Result<OracleMetrics> {
    let ks = ks_at_faces(beliefs, &d.p, grid)?;
    Ok(OracleMetrics {
        t,
        ks,
        err_i: (fractions[2] - d.rho_i).abs(),
        err_r: (fractions[3] - d.rho_r).abs(),
        err_d: (fractions[4] - d.rho_d).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filter::logistic_closed_form;
    use crate::grid::{Field, TimeGrid};

    fn setup(psi_val: f64, t_end: f64) -> (ModelParams, Vec<PolicyField>, Vec<BeliefDensity>, MeanFieldPath) {
        let p = ModelParams::canonical();
        let g = BeliefGrid::new(101).unwrap();
        let t = TimeGrid::covering(t_end, 0.05).unwrap();
        let psi = vec![Field::filled(t, g, psi_val)];
        let init = vec![BeliefDensity::gaussian_bump(&g, 0.5, 0.1, 1.0, 0.0, 0.0, 0.0).unwrap()];
        let mf = MeanFieldPath::constant(t, 0.05, 0.5).unwrap();
        (p, psi, init, mf)
    }

    fn cfg(n: usize, seed: u64) -> SimConfig {
        SimConfig {
            n_agents: n,
            seed,
            dt_sim: 0.01,
            mode: SimMode::Exogenous,
            record_every: 10,
            sample_times: vec![1.0],
        }
    }

    #[test]
    fn bit_identical_reruns() {
        let (p, psi, init, mf) = setup(1.0, 2.0);
        let a = simulate(&p, &psi, &init, Some(&mf), &cfg(5000, 7)).unwrap();
        let b = simulate(&p, &psi, &init, Some(&mf), &cfg(5000, 7)).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.samples, b.samples);
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let c = pool.install(|| simulate(&p, &psi, &init, Some(&mf), &cfg(5000, 7)).unwrap());
        assert_eq!(a.records, c.records);
        let d = simulate(&p, &psi, &init, Some(&mf), &cfg(5000, 8)).unwrap();
        assert_ne!(a.records, d.records);
    }

    #[test]
    fn fractions_sum_to_one() {
        let (p, psi, init, mf) = setup(1.0, 2.0);
        let out = simulate(&p, &psi, &init, Some(&mf), &cfg(3000, 1)).unwrap();
        for r in &out.records {
            assert!((r.fractions.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn isolation_branching_fraction() {
        let (p, psi, init, mf) = setup(0.0, 30.0);
        let mut c = cfg(100_000, 3);
        c.sample_times.clear();
        c.record_every = 1000;
        c.dt_sim = 0.02;
        let out = simulate(&p, &psi, &init, Some(&mf), &c).unwrap();
        let last = out.records.last().unwrap();
        assert!(out.records.iter().all(|r| r.beta_hat == 0.0));
        let f = last.fractions;
        let removed = f[3] + f[4];
        let share_r = f[3] / removed;
        let sigma = (0.8 * 0.2 / (removed * 100_000.0)).sqrt();
        assert!((share_r - 0.8).abs() <= 3.0 * sigma, "{share_r} {sigma}");
        // Nobody becomes infected while isolating, so s stays at its start.
        let s0 = out.records[0].fractions[0];
        assert_eq!(f[0], s0);
    }

    #[test]
    fn isolating_beliefs_follow_logistic() {
        let (p, psi, init, _) = setup(0.0, 2.0);
        let t = psi[0].time;
        let mf = MeanFieldPath::constant(t, 0.0, 0.5).unwrap();
        let c = cfg(200, 5);
        let out = simulate(&p, &psi, &init, Some(&mf), &c).unwrap();
        let mut c0 = c.clone();
        c0.sample_times = vec![0.0];
        let start = simulate(&p, &psi, &init, Some(&mf), &c0).unwrap();
        // Agents still symptom-free at t=1 keep their order; compare the
        // largest belief which is the image of some initial belief.
        let a1 = out.samples[0].beliefs[0].iter().cloned().fold(0.0, f64::max);
        let pre = start.samples[0].beliefs[0]
            .iter()
            .map(|&a0| logistic_closed_form(a0, 2.0, 1.0))
            .fold(f64::INFINITY, |best: f64, x| if (x - a1).abs() < (best - a1).abs() { x } else { best });
        assert!((pre - a1).abs() < 1e-9);
    }

    #[test]
    fn coarse_step_rejected() {
        let (p, psi, init, mf) = setup(1.0, 2.0);
        let mut c = cfg(10, 1);
        c.dt_sim = 0.1;
        assert!(matches!(simulate(&p, &psi, &init, Some(&mf), &c), Err(Error::StepTooCoarse { .. })));
    }

    #[test]
    fn self_consistent_with_isolation_has_no_activity() {
        let (p, psi, init, _) = setup(0.0, 1.0);
        let mut c = cfg(2000, 2);
        c.mode = SimMode::SelfConsistent;
        let out = simulate(&p, &psi, &init, None, &c).unwrap();
        assert!(out.records.iter().all(|r| r.beta_hat == 0.0));
    }
}
