//! CSV artifacts. Every file has a header row, `\n` line endings and floats
//! in Rust's shortest round-trip decimal form, so identical runs produce
//! byte-identical files.

use std::fs::File;
use std::path::Path;

use crate::error::Result;
use crate::filter::BeliefPath;
use crate::fpk::Propagation;
use crate::fully_observed::PopulationPath;
use crate::grid::{PolicyField, ValueField};
use crate::mc::{BeliefSample, OracleMetrics, SimRecord};
use crate::mean_field::MeanFieldPath;
use crate::stationary::{Case1Report, Check};

fn writer(path: &Path, header: &[&str]) -> Result<csv::Writer<File>> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    Ok(w)
}

fn num(x: f64) -> String {
    format!("{x}")
}

/// `(t, theta, rho_s, rho_a, rho_i, rho_r, rho_d, beta, alpha)` with an
/// aggregate row `theta = ALL` after the per-attribute rows of each node.
pub fn write_population(path: &Path, pop: &PopulationPath, mf: &MeanFieldPath) -> Result<()> {
    let mut w = writer(path, &["t", "theta", "rho_s", "rho_a", "rho_i", "rho_r", "rho_d", "beta", "alpha"])?;
    for n in 0..pop.time.n_nodes() {
        let t = num(pop.time.t(n));
        let rows = pop.thetas.iter().map(|s| s.as_str()).zip(pop.rho.iter().map(|r| r[n]));
        for (theta, r) in rows.chain(std::iter::once(("ALL", pop.aggregate(n)))) {
            let mut rec = vec![t.clone(), theta.to_string()];
            rec.extend(r.iter().map(|&x| num(x)));
            rec.push(num(mf.beta[n]));
            rec.push(num(mf.alpha[n]));
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `(t, a)`.
pub fn write_belief_path(path: &Path, b: &BeliefPath) -> Result<()> {
    let mut w = writer(path, &["t", "a"])?;
    for (n, a) in b.a.iter().enumerate() {
        w.write_record([num(b.time.t(n)), num(*a)])?;
    }
    w.flush()?;
    Ok(())
}

/// `(theta, t, a, phi, psi)` on every time and belief node.
pub fn write_value_policy(path: &Path, thetas: &[String], value: &[ValueField], policy: &[PolicyField]) -> Result<()> {
    let mut w = writer(path, &["theta", "t", "a", "phi", "psi"])?;
    for ((theta, v), p) in thetas.iter().zip(value).zip(policy) {
        for n in 0..v.time.n_nodes() {
            let t = num(v.time.t(n));
            for j in 0..v.belief.n_nodes() {
                w.write_record([theta.clone(), t.clone(), num(v.belief.node(j)), num(v.get(n, j)), num(p.get(n, j))])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `(a, phi, psi)` for one stationary slice.
pub fn write_stationary_slice(path: &Path, a: &[f64], phi: &[f64], psi: &[f64]) -> Result<()> {
    let mut w = writer(path, &["a", "phi", "psi"])?;
    for ((a, f), u) in a.iter().zip(phi).zip(psi) {
        w.write_record([num(*a), num(*f), num(*u)])?;
    }
    w.flush()?;
    Ok(())
}

/// `(theta, t, a, p)` at cell centers for every kept density slice.
pub fn write_density(path: &Path, thetas: &[String], prop: &Propagation) -> Result<()> {
    let mut w = writer(path, &["theta", "t", "a", "p"])?;
    let kept = prop.densities.first().map_or(0, |d| d.len());
    let node_of = |k: usize| {
        if kept == prop.time.n_nodes() {
            k
        } else if k == 0 {
            0
        } else {
            prop.time.n_steps
        }
    };
    for (theta, ds) in thetas.iter().zip(&prop.densities) {
        for (k, d) in ds.iter().enumerate() {
            let t = num(prop.time.t(node_of(k)));
            for (c, p) in d.p.iter().enumerate() {
                w.write_record([theta.clone(), t.clone(), num(prop.grid.center(c)), num(*p)])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// `(t, theta, rho_i, rho_r, rho_d, beta, alpha)` for kept density slices.
pub fn write_fpk_series(path: &Path, thetas: &[String], prop: &Propagation) -> Result<()> {
    let mut w = writer(path, &["t", "theta", "rho_i", "rho_r", "rho_d", "beta", "alpha"])?;
    let kept = prop.densities.first().map_or(0, |d| d.len());
    let nodes: Vec<usize> = if kept == prop.time.n_nodes() { (0..kept).collect() } else { vec![0, prop.time.n_steps] };
    for (k, &n) in nodes.iter().enumerate() {
        for (theta, ds) in thetas.iter().zip(&prop.densities) {
            let d = &ds[k];
            w.write_record([
                num(prop.time.t(n)),
                theta.clone(),
                num(d.rho_i),
                num(d.rho_r),
                num(d.rho_d),
                num(prop.mean_field.beta[n]),
                num(prop.mean_field.alpha[n]),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `(t, beta, alpha)`.
pub fn write_mean_field(path: &Path, mf: &MeanFieldPath) -> Result<()> {
    let mut w = writer(path, &["t", "beta", "alpha"])?;
    for n in 0..mf.time.n_nodes() {
        w.write_record([num(mf.time.t(n)), num(mf.beta[n]), num(mf.alpha[n])])?;
    }
    w.flush()?;
    Ok(())
}

/// `(iter, residual)`, iterations counted from 1.
pub fn write_convergence(path: &Path, history: &[f64]) -> Result<()> {
    let mut w = writer(path, &["iter", "residual"])?;
    for (k, r) in history.iter().enumerate() {
        w.write_record([(k + 1).to_string(), num(*r)])?;
    }
    w.flush()?;
    Ok(())
}

/// `(check, value, tolerance, pass)`.
pub fn write_checks(path: &Path, checks: &[Check]) -> Result<()> {
    let mut w = writer(path, &["check", "value", "tolerance", "pass"])?;
    for c in checks {
        w.write_record([c.name.clone(), num(c.value), num(c.tolerance), c.pass.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// `(t, beta_hat, alpha_hat, frac_s, frac_a, frac_i, frac_r, frac_d)`.
pub fn write_mc_series(path: &Path, records: &[SimRecord]) -> Result<()> {
    let mut w = writer(path, &["t", "beta_hat", "alpha_hat", "frac_s", "frac_a", "frac_i", "frac_r", "frac_d"])?;
    for r in records {
        let mut rec = vec![num(r.t), num(r.beta_hat), num(r.alpha_hat)];
        rec.extend(r.fractions.iter().map(|&x| num(x)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// `(t, agent_id, a)` for every symptom-free agent in every sample.
pub fn write_belief_samples(path: &Path, samples: &[BeliefSample]) -> Result<()> {
    let mut w = writer(path, &["t", "agent_id", "a"])?;
    for s in samples {
        let mut rows: Vec<(u64, f64)> =
            s.ids.iter().zip(&s.beliefs).flat_map(|(i, b)| i.iter().copied().zip(b.iter().copied())).collect();
        rows.sort_by_key(|r| r.0);
        for (id, a) in rows {
            w.write_record([num(s.t), id.to_string(), num(a)])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// `(lambda_ai, a_thresh, valid, pde_threshold, psi_at_zero, a_bar, a_bar_scaled)`;
/// a missing PDE threshold is written as an empty field.
pub fn write_case1(path: &Path, report: &Case1Report) -> Result<()> {
    let mut w =
        writer(path, &["lambda_ai", "a_thresh", "valid", "pde_threshold", "psi_at_zero", "a_bar", "a_bar_scaled"])?;
    for r in &report.rows {
        w.write_record([
            num(r.lambda_ai),
            num(r.a_thresh),
            r.valid.to_string(),
            r.pde_threshold.map(num).unwrap_or_default(),
            num(r.psi_at_zero),
            num(r.a_bar),
            num(r.a_bar_scaled),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `(theta, t, ks, err_i, err_r, err_d)`.
pub fn write_oracle(path: &Path, rows: &[(String, OracleMetrics)]) -> Result<()> {
    let mut w = writer(path, &["theta", "t", "ks", "err_i", "err_r", "err_d"])?;
    for (theta, m) in rows {
        w.write_record([theta.clone(), num(m.t), num(m.ks), num(m.err_i), num(m.err_r), num(m.err_d)])?;
    }
    w.flush()?;
    Ok(())
}
