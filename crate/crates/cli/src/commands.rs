//! Subcommand implementations. Each writes its CSV artifacts into the output
//! directory and returns a summary with named gates.

use std::path::Path;

use anyhow::Result;
use epimfg_core::fpk::propagate_population;
use epimfg_core::fully_observed::fo_mfe;
use epimfg_core::hjb::{policy_threshold, solve_stationary_hjb, StationaryOptions};
use epimfg_core::mc::{compare_to_fpk, simulate, SimConfig, SimMode};
use epimfg_core::mfe::{best_response, picard_run, verify_fixed_point, MfeProblem, Observation};
use epimfg_core::model::compute_r0;
use epimfg_core::output;
use epimfg_core::stationary::{
    case1_limit_check, stationary_value_closed_form, threshold_constants, verify_switching, StationaryRegime,
};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;

#[derive(Debug, Clone, Serialize)]
pub struct Gate {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Gate {
    fn at_most(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, pass: value <= tolerance }
    }

    fn holds(name: impl Into<String>, ok: bool) -> Self {
        Self { name: name.into(), value: f64::from(u8::from(ok)), tolerance: 1.0, pass: ok }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Summary {
    pub command: String,
    pub version: String,
    pub config_hash: String,
    pub pass: bool,
    pub gates: Vec<Gate>,
    pub results: Value,
}

pub struct Outcome {
    pub gates: Vec<Gate>,
    pub results: Value,
}

fn thetas(cfg: &RunConfig) -> Vec<String> {
    cfg.model.attributes.iter().map(|a| a.id.clone()).collect()
}

fn sup(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |a: f64, b| a.max(b.abs()))
}

pub fn fo_mfe_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let time = cfg.time_grid()?;
    let sol = fo_mfe(&cfg.model, time, &cfg.rho0)?;
    output::write_population(&out.join("population.csv"), &sol.population, &sol.mean_field)?;
    output::write_mean_field(&out.join("mean_field.csv"), &sol.mean_field)?;

    let problem =
        MfeProblem { params: cfg.model.clone(), time, observation: Observation::Full { rho0: cfg.rho0.clone() } };
    let picard = picard_run(&problem, problem.initial_guess()?, &cfg.fixed_point)?;
    output::write_convergence(&out.join("convergence.csv"), &picard.history)?;

    let tol = cfg.fixed_point.tol;
    let beta_max = sup(&sol.mean_field.beta);
    let s_drift = sol
        .population
        .rho
        .iter()
        .zip(&cfg.rho0)
        .flat_map(|(traj, r0)| traj.iter().map(move |r| (r[0] - r0[0]).abs()))
        .fold(0.0, f64::max);
    let alpha_gap =
        picard.mean_field.alpha.iter().zip(&sol.mean_field.alpha).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    let gates = vec![
        Gate::at_most("beta_max", beta_max, tol),
        Gate::at_most("picard_beta_max", sup(&picard.mean_field.beta), tol),
        Gate::holds("picard_converged", picard.converged),
        Gate::at_most("picard_alpha_gap", alpha_gap, 10.0 * tol),
    ];
    let results = json!({
        "beta_max": beta_max,
        "alpha_end": sol.mean_field.alpha.last(),
        "rho_s_drift": s_drift,
        "degenerate_alpha": sol.degenerate_alpha,
        "picard_iterations": picard.history.len(),
        "picard_residual": picard.residual(),
        "solutions": sol.solutions,
    });
    Ok(Outcome { gates, results })
}

pub fn po_solve_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.belief_grid()?;
    let mf = cfg.exogenous_mean_field()?;
    let (value, policy) = best_response(&cfg.model, &mf, &grid)?;
    let prop =
        propagate_population(&cfg.model, &policy, &cfg.initial_densities()?, &grid, None, cfg.propagation(true))?;
    let names = thetas(cfg);
    output::write_value_policy(&out.join("value_policy.csv"), &names, &value, &policy)?;
    output::write_density(&out.join("density.csv"), &names, &prop)?;
    output::write_fpk_series(&out.join("fpk_series.csv"), &names, &prop)?;
    output::write_mean_field(&out.join("mean_field.csv"), &prop.mean_field)?;
    let last = prop.time.n_steps;
    let finals: Vec<Value> = names
        .iter()
        .enumerate()
        .map(|(k, th)| {
            let d = prop.density(k, last);
            json!({
                "theta": th,
                "threshold_t0": policy_threshold(policy[k].slice(0), &grid),
                "rho_i": d.rho_i, "rho_r": d.rho_r, "rho_d": d.rho_d,
            })
        })
        .collect();
    let gates = vec![
        Gate::at_most("mass_drift", prop.max_mass_drift, 1e-8),
        Gate::at_most("negativity_clip", prop.clipped, 1e-6),
    ];
    let results = json!({
        "beta_max": sup(&prop.raw_beta),
        "alpha_end": prop.raw_alpha.last(),
        "final": finals,
    });
    Ok(Outcome { gates, results })
}

pub fn po_mfe_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let problem = MfeProblem {
        params: cfg.model.clone(),
        time: cfg.time_grid()?,
        observation: Observation::Partial {
            init: cfg.initial_densities()?,
            grid: cfg.belief_grid()?,
            fpk: cfg.propagation(false),
            relaxed_switch: cfg.fpk.relaxed_switch,
        },
    };
    let res = picard_run(&problem, problem.initial_guess()?, &cfg.fixed_point)?;
    output::write_convergence(&out.join("convergence.csv"), &res.history)?;
    output::write_mean_field(&out.join("mean_field.csv"), &res.mean_field)?;
    output::write_value_policy(&out.join("value_policy.csv"), &thetas(cfg), &res.value, &res.policy)?;
    let tol = cfg.fixed_point.tol;
    let mut gates = vec![Gate::holds("converged", res.converged)];
    let mut extra = None;
    if res.converged {
        let e = verify_fixed_point(&problem, &res, cfg.fixed_point.clamp)?;
        gates.push(Gate::at_most("extra_iteration_residual", e, 2.0 * tol));
        extra = Some(e);
    } else {
        log::warn!("fixed point not reached after {} iterations", res.history.len());
    }
    let results = json!({
        "iterations": res.history.len(),
        "residual": res.residual(),
        "extra_iteration_residual": extra,
        "history": res.history,
        "beta_max": sup(&res.mean_field.beta),
    });
    Ok(Outcome { gates, results })
}

pub fn stationary_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.belief_grid()?;
    let st = &cfg.stationary;
    let opts = StationaryOptions { tol: st.tol, ..Default::default() };
    let mut gates = Vec::new();
    let mut checks = Vec::new();
    let mut per_theta = Vec::new();
    for m in cfg.model.agents() {
        let c = threshold_constants(&m, st.beta_bar, st.alpha_bar)?;
        let report = verify_switching(&c, &m, st.probes)?;
        let sol = solve_stationary_hjb(st.beta_bar, st.alpha_bar, &grid, &m, opts)?;
        let nodes = grid.nodes();
        output::write_stationary_slice(&out.join(format!("stationary_{}.csv", m.theta)), &nodes, &sol.phi, &sol.psi)?;
        let pde_threshold = sol.threshold();
        let mut value_error = None;
        match report.regime {
            StationaryRegime::Threshold => {
                let err = nodes
                    .iter()
                    .zip(&sol.phi)
                    .map(|(&a, &phi)| stationary_value_closed_form(a, &c).map(|v| (v - phi).abs()))
                    .collect::<epimfg_core::Result<Vec<f64>>>()?
                    .into_iter()
                    .fold(0.0, f64::max);
                value_error = Some(err);
                let gap = pde_threshold.map_or(f64::INFINITY, |t| (t - c.a_thresh).abs());
                gates.push(Gate::at_most(format!("{}:pde_threshold_gap", m.theta), gap, 2.0 * grid.da()));
            }
            StationaryRegime::Isolating => {
                gates.push(Gate::holds(format!("{}:pde_isolates", m.theta), sol.psi.iter().all(|&u| u == 0.0)));
            }
            StationaryRegime::Unresolved => {}
        }
        gates.push(Gate::holds(format!("{}:switching_checks", m.theta), report.all_pass()));
        for mut ch in report.checks.clone() {
            ch.name = format!("{}:{}", m.theta, ch.name);
            checks.push(ch);
        }
        per_theta.push(json!({
            "theta": m.theta,
            "constants": c,
            "regime": report.regime,
            "near_degenerate": report.near_degenerate,
            "pde_threshold": pde_threshold,
            "pde_iterations": sol.iters,
            "value_error": value_error,
        }));
    }
    output::write_checks(&out.join("checks.csv"), &checks)?;
    Ok(Outcome { gates, results: json!({ "grid_na": grid.n_nodes(), "attributes": per_theta }) })
}

pub fn case1_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.belief_grid()?;
    let st = &cfg.stationary;
    let opts = StationaryOptions { tol: st.tol, ..Default::default() };
    let mut gates = Vec::new();
    let mut reports = Vec::new();
    for m in cfg.model.agents() {
        let r = case1_limit_check(&m, st.beta_bar, st.alpha_bar, &st.ladder, &grid, opts)?;
        output::write_case1(&out.join(format!("case1_{}.csv", m.theta)), &r)?;
        gates.push(Gate::holds(format!("{}:policy_matches_full_observation", m.theta), r.policy_matches));
        gates.push(Gate::holds(format!("{}:threshold_monotone_towards_alpha", m.theta), r.thresh_approaches_alpha));
        reports.push(json!({ "theta": m.theta, "report": r }));
    }
    Ok(Outcome { gates, results: json!({ "attributes": reports }) })
}

pub fn mc_validate_cmd(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let grid = cfg.belief_grid()?;
    let full = cfg.exogenous_mean_field()?;
    let (_, policy_full) = best_response(&cfg.model, &full, &grid)?;
    // Simulate only as far as the last requested sample.
    let t_end = cfg.mc.sample_times.iter().cloned().fold(0.0, f64::max);
    let steps = ((t_end / full.time.dt).ceil() as usize).clamp(1, full.time.n_steps);
    let mf = full.truncate(steps)?;
    let policy = policy_full.iter().map(|p| p.truncate(steps)).collect::<epimfg_core::Result<Vec<_>>>()?;
    let init = cfg.initial_densities()?;
    let prop = propagate_population(&cfg.model, &policy, &init, &grid, Some(&mf), cfg.propagation(true))?;
    let sim_cfg = SimConfig {
        n_agents: cfg.mc.n_agents,
        seed: cfg.mc.seed,
        dt_sim: cfg.mc.dt_sim,
        mode: SimMode::Exogenous,
        record_every: cfg.mc.record_every,
        sample_times: cfg.mc.sample_times.clone(),
    };
    let sim = simulate(&cfg.model, &policy, &init, Some(&mf), &sim_cfg)?;
    output::write_mc_series(&out.join("mc_series.csv"), &sim.records)?;
    if cfg.mc.dump_samples {
        output::write_belief_samples(&out.join("belief_samples.csv"), &sim.samples)?;
    }
    let names = thetas(cfg);
    let mut rows = Vec::new();
    for s in &sim.samples {
        let n = mf.time.nearest(s.t);
        for (k, th) in names.iter().enumerate() {
            let met = compare_to_fpk(s.t, &s.beliefs[k], &s.fractions[k], prop.density(k, n), &grid)?;
            rows.push((th.clone(), met));
        }
    }
    output::write_oracle(&out.join("oracle.csv"), &rows)?;
    let ks = rows.iter().map(|r| r.1.ks).fold(0.0, f64::max);
    let comp = rows.iter().map(|r| r.1.max_compartment_error()).fold(0.0, f64::max);
    let gates = vec![
        Gate::at_most("ks", ks, cfg.mc.ks_gate),
        Gate::at_most("compartment_error", comp, cfg.mc.compartment_gate),
        Gate::at_most("mass_drift", prop.max_mass_drift, 1e-8),
        Gate::at_most("negativity_clip", prop.clipped, 1e-6),
    ];
    let results = json!({
        "n_agents": cfg.mc.n_agents,
        "dt_sim": sim.dt,
        "class_sizes": sim.class_sizes,
        "metrics": rows.iter().map(|(th, m)| json!({"theta": th, "metrics": m})).collect::<Vec<_>>(),
    });
    Ok(Outcome { gates, results })
}

pub fn r0_cmd(cfg: &RunConfig) -> Result<Outcome> {
    let mut rows = Vec::new();
    for m in cfg.model.agents() {
        let r0 = compute_r0(&m, cfg.r0.beta_bar)?;
        println!("{} {}", m.theta, r0);
        rows.push(json!({ "theta": m.theta, "r0": r0 }));
    }
    Ok(Outcome { gates: Vec::new(), results: json!({ "beta_bar": cfg.r0.beta_bar, "r0": rows }) })
}
