//! Run configuration: one JSON document, every section optional, unknown keys
//! rejected. Command-line flags override the file.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use epimfg_core::fpk::{BeliefDensity, FpkScheme, PropagationOptions};
use epimfg_core::mfe::FixedPointConfig;
use epimfg_core::{BeliefGrid, MeanFieldPath, ModelParams, TimeGrid};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelParams,
    pub grids: GridConfig,
    pub fixed_point: FixedPointConfig,
    pub fpk: FpkConfig,
    pub p0: BumpConfig,
    /// Initial compartments `(s, a, i, r, d)` for the fully observed model,
    /// one per attribute class in declaration order.
    pub rho0: Vec<[f64; 5]>,
    /// Exogenous mean field for `po-solve` and `mc-validate`.
    pub mean_field: MeanFieldConfig,
    pub stationary: StationaryConfig,
    pub mc: McConfig,
    pub r0: R0Config,
    pub output_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelParams::canonical(),
            grids: GridConfig::default(),
            fixed_point: FixedPointConfig::default(),
            fpk: FpkConfig::default(),
            p0: BumpConfig::default(),
            rho0: vec![[0.9, 0.1, 0.0, 0.0, 0.0]],
            mean_field: MeanFieldConfig::default(),
            stationary: StationaryConfig::default(),
            mc: McConfig::default(),
            r0: R0Config::default(),
            output_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    /// Belief nodes including both endpoints.
    pub n_a: usize,
    /// Mean-field time step.
    pub dt: f64,
    pub horizon: f64,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self { n_a: 101, dt: 0.05, horizon: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FpkConfig {
    pub scheme: FpkScheme,
    pub dt_max: f64,
    /// Place policy switches inside grid cells in the fixed-point loop.
    pub relaxed_switch: bool,
}

impl Default for FpkConfig {
    fn default() -> Self {
        Self { scheme: FpkScheme::default(), dt_max: 0.01, relaxed_switch: true }
    }
}

/// Truncated Gaussian initial belief density plus compartment masses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BumpConfig {
    pub mean: f64,
    pub sd: f64,
    pub belief_mass: f64,
    pub rho_i: f64,
    pub rho_r: f64,
    pub rho_d: f64,
}

impl Default for BumpConfig {
    fn default() -> Self {
        Self { mean: 0.5, sd: 0.1, belief_mass: 1.0, rho_i: 0.0, rho_r: 0.0, rho_d: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeanFieldConfig {
    pub beta: f64,
    pub alpha: f64,
    /// Optional CSV `(t, beta, alpha)` on the run's time grid; overrides the constants.
    pub path: Option<PathBuf>,
}

impl Default for MeanFieldConfig {
    fn default() -> Self {
        Self { beta: 0.05, alpha: 0.5, path: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StationaryConfig {
    pub beta_bar: f64,
    pub alpha_bar: f64,
    pub probes: usize,
    pub tol: f64,
    pub ladder: Vec<f64>,
}

impl Default for StationaryConfig {
    fn default() -> Self {
        Self { beta_bar: 0.05, alpha_bar: 0.5, probes: 100, tol: 1e-8, ladder: vec![2.0, 8.0, 32.0, 128.0] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct McConfig {
    pub n_agents: usize,
    pub seed: u64,
    pub dt_sim: f64,
    pub sample_times: Vec<f64>,
    pub record_every: usize,
    pub dump_samples: bool,
    pub ks_gate: f64,
    pub compartment_gate: f64,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_agents: 100_000,
            seed: 0,
            dt_sim: 0.005,
            sample_times: vec![1.0, 3.0, 5.0],
            record_every: 20,
            dump_samples: false,
            ks_gate: 0.02,
            compartment_gate: 0.005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct R0Config {
    pub beta_bar: f64,
}

impl Default for R0Config {
    fn default() -> Self {
        Self { beta_bar: 1.0 }
    }
}

/// Flag values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub grid_na: Option<usize>,
    pub dt: Option<f64>,
    pub max_iters: Option<usize>,
    pub tol: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, ov: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))?
            }
            None => RunConfig::default(),
        };
        if let Some(o) = &ov.out {
            cfg.output_dir = o.clone();
        }
        if let Some(s) = ov.seed {
            cfg.mc.seed = s;
        }
        if let Some(n) = ov.grid_na {
            cfg.grids.n_a = n;
        }
        if let Some(dt) = ov.dt {
            cfg.grids.dt = dt;
        }
        if let Some(n) = ov.max_iters {
            cfg.fixed_point.max_iters = n;
        }
        if let Some(t) = ov.tol {
            cfg.fixed_point.tol = t;
        }
        cfg.model = cfg.model.clone().validate()?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.fixed_point.validate()?;
        self.belief_grid()?;
        self.time_grid()?;
        if self.rho0.len() != self.model.attributes.len() {
            bail!("rho0 has {} entries for {} attribute classes", self.rho0.len(), self.model.attributes.len());
        }
        if self.fpk.dt_max.is_nan() || self.fpk.dt_max <= 0.0 {
            bail!("fpk.dt_max must be positive");
        }
        if let FpkScheme::Characteristic { refinement: 0 } = self.fpk.scheme {
            bail!("fpk refinement must be at least 1");
        }
        if self.stationary.ladder.windows(2).any(|w| w[1] <= w[0]) {
            bail!("stationary.ladder must be increasing");
        }
        self.initial_densities()?;
        self.exogenous_mean_field()?;
        Ok(())
    }

    /// SHA-256 of the effective configuration serialized as JSON, with the
    /// output directory left out so the same run hashes the same anywhere.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output_dir");
        }
        let text = serde_json::to_string(&v).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    pub fn belief_grid(&self) -> Result<BeliefGrid> {
        Ok(BeliefGrid::new(self.grids.n_a)?)
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        Ok(TimeGrid::covering(self.grids.horizon, self.grids.dt)?)
    }

    pub fn propagation(&self, keep_densities: bool) -> PropagationOptions {
        PropagationOptions { scheme: self.fpk.scheme, dt_max: self.fpk.dt_max, keep_densities }
    }

    pub fn initial_densities(&self) -> Result<Vec<BeliefDensity>> {
        let g = self.belief_grid()?;
        let b = &self.p0;
        let d = BeliefDensity::gaussian_bump(&g, b.mean, b.sd, b.belief_mass, b.rho_i, b.rho_r, b.rho_d)?;
        Ok(vec![d; self.model.attributes.len()])
    }

    pub fn exogenous_mean_field(&self) -> Result<MeanFieldPath> {
        let time = self.time_grid()?;
        match &self.mean_field.path {
            None => Ok(MeanFieldPath::constant(time, self.mean_field.beta, self.mean_field.alpha)?),
            Some(p) => read_mean_field(p, time),
        }
    }
}

#[derive(Deserialize)]
struct MfRow {
    t: f64,
    beta: f64,
    alpha: f64,
}

fn read_mean_field(path: &Path, time: TimeGrid) -> Result<MeanFieldPath> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let mut beta = Vec::new();
    let mut alpha = Vec::new();
    for (n, row) in rdr.deserialize::<MfRow>().enumerate() {
        let row = row?;
        if (row.t - time.t(n)).abs() > 1e-9 * time.horizon().max(1.0) {
            bail!("mean-field row {n} has t = {} but the time grid expects {}", row.t, time.t(n));
        }
        beta.push(row.beta);
        alpha.push(row.alpha);
    }
    Ok(MeanFieldPath::new(time, beta, alpha)?)
}
