//! Single-agent epidemic model: states, rates, costs and the linear part of
//! the population dynamics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, ParamError, Result};

/// Epidemiological state of an agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EpiState {
    /// Susceptible.
    S,
    /// Presymptomatic (infectious, not yet aware).
    A,
    /// Symptomatic.
    I,
    /// Recovered.
    R,
    /// Dead.
    D,
}

impl EpiState {
    pub const ALL: [EpiState; 5] = [EpiState::S, EpiState::A, EpiState::I, EpiState::R, EpiState::D];

    /// `r` and `d` stop the controlled chain.
    pub fn is_terminal(self) -> bool {
        matches!(self, EpiState::R | EpiState::D)
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

/// Per-attribute overrides of the transition rates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_sa: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_ai: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_ir: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_id: Option<f64>,
}

/// One value of the discrete agent attribute with its population weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attribute {
    pub id: String,
    pub weight: f64,
}

fn default_c_h_i() -> f64 {
    1.0
}
fn default_c_a() -> f64 {
    1.0
}
fn default_phi_d() -> f64 {
    10.0
}
fn default_attributes() -> Vec<Attribute> {
    vec![Attribute { id: "all".into(), weight: 1.0 }]
}

/// Model parameters shared by every solver.
///
/// Rates are in 1/time for a user-chosen time unit. Costs are per unit time
/// (running) or lump sums (terminal `phi_r`, `phi_d`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelParams {
    pub lambda_sa: f64,
    pub lambda_ai: f64,
    pub lambda_ir: f64,
    pub lambda_id: f64,
    pub gamma: f64,
    #[serde(default = "default_c_h_i")]
    pub c_h_i: f64,
    #[serde(default = "default_c_a")]
    pub c_a: f64,
    #[serde(default)]
    pub phi_r: f64,
    #[serde(default = "default_phi_d")]
    pub phi_d: f64,
    #[serde(default = "default_attributes")]
    pub attributes: Vec<Attribute>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<String, RateOverrides>,
}

/// Scalar parameters of a single attribute class, overrides applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentModel {
    pub theta: String,
    pub weight: f64,
    pub lambda_sa: f64,
    pub lambda_ai: f64,
    pub lambda_ir: f64,
    pub lambda_id: f64,
    pub gamma: f64,
    pub c_h_i: f64,
    pub c_a: f64,
    pub phi_r: f64,
    pub phi_d: f64,
}

impl AgentModel {
    /// Total exit rate from the symptomatic state.
    pub fn removal_rate(&self) -> f64 {
        self.lambda_ir + self.lambda_id
    }
}

impl Default for ModelParams {
    fn default() -> Self {
        Self::canonical()
    }
}

impl ModelParams {
    /// Reference parameter set used throughout the tests and the example configs.
    pub fn canonical() -> Self {
        Self {
            lambda_sa: 1.0,
            lambda_ai: 2.0,
            lambda_ir: 0.4,
            lambda_id: 0.1,
            gamma: 0.1,
            c_h_i: 1.0,
            c_a: 1.0,
            phi_r: 0.0,
            phi_d: 10.0,
            attributes: default_attributes(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn n_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// Resolve the rates of attribute `idx`.
    pub fn agent(&self, idx: usize) -> AgentModel {
        let attr = &self.attributes[idx];
        let ov = self.overrides.get(&attr.id).cloned().unwrap_or_default();
        AgentModel {
            theta: attr.id.clone(),
            weight: attr.weight,
            lambda_sa: ov.lambda_sa.unwrap_or(self.lambda_sa),
            lambda_ai: ov.lambda_ai.unwrap_or(self.lambda_ai),
            lambda_ir: ov.lambda_ir.unwrap_or(self.lambda_ir),
            lambda_id: ov.lambda_id.unwrap_or(self.lambda_id),
            gamma: self.gamma,
            c_h_i: self.c_h_i,
            c_a: self.c_a,
            phi_r: self.phi_r,
            phi_d: self.phi_d,
        }
    }

    pub fn agents(&self) -> Vec<AgentModel> {
        (0..self.n_attributes()).map(|i| self.agent(i)).collect()
    }

    /// Check every standing assumption and return the parameters unchanged.
    pub fn validate(self) -> std::result::Result<Self, ParamError> {
        let scalars = [
            ("lambda_sa", self.lambda_sa),
            ("lambda_ai", self.lambda_ai),
            ("lambda_ir", self.lambda_ir),
            ("lambda_id", self.lambda_id),
            ("gamma", self.gamma),
            ("c_h_i", self.c_h_i),
            ("c_a", self.c_a),
            ("phi_r", self.phi_r),
            ("phi_d", self.phi_d),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(ParamError::NonFinite(name.into()));
            }
        }
        if self.attributes.is_empty() {
            return Err(ParamError::NoAttributes);
        }
        let mut seen = std::collections::BTreeSet::new();
        for a in &self.attributes {
            if !seen.insert(a.id.as_str()) {
                return Err(ParamError::DuplicateAttribute(a.id.clone()));
            }
            if !a.weight.is_finite() {
                return Err(ParamError::NonFinite(format!("weight[{}]", a.id)));
            }
            if a.weight < 0.0 {
                return Err(ParamError::NegativeWeight { id: a.id.clone(), weight: a.weight });
            }
        }
        for key in self.overrides.keys() {
            if !seen.contains(key.as_str()) {
                return Err(ParamError::UnknownAttribute(key.clone()));
            }
        }
        if self.gamma <= 0.0 {
            return Err(ParamError::ZeroDiscount(self.gamma));
        }
        let total: f64 = self.attributes.iter().map(|a| a.weight).sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(ParamError::PmfNotNormalized(total));
        }
        for agent in self.agents() {
            let rates = [
                ("lambda_sa", agent.lambda_sa),
                ("lambda_ai", agent.lambda_ai),
                ("lambda_ir", agent.lambda_ir),
                ("lambda_id", agent.lambda_id),
            ];
            for (name, v) in rates {
                if !v.is_finite() {
                    return Err(ParamError::NonFinite(format!("{name}[{}]", agent.theta)));
                }
                if v < 0.0 {
                    let name =
                        if self.attributes.len() > 1 { format!("{name}[{}]", agent.theta) } else { name.to_string() };
                    return Err(ParamError::NegativeRate { name, value: v });
                }
            }
            let phi_i = crate::fully_observed::phi_bar_i_raw(&agent);
            if !(phi_i > 0.0) {
                return Err(ParamError::NonpositivePhiI { theta: agent.theta.clone(), value: phi_i });
            }
        }
        Ok(self)
    }
}

/// Running cost `c(x, u; alpha) = c_h(x) + c_a(x) u - alpha u` on the live states.
pub fn running_cost(agent: &AgentModel, x: EpiState, u: f64, alpha: f64) -> Result<f64> {
    match x {
        EpiState::S => Ok(-alpha * u),
        EpiState::A => Ok((agent.c_a - alpha) * u),
        EpiState::I => Ok(agent.c_h_i + (agent.c_a - alpha) * u),
        EpiState::R | EpiState::D => Err(Error::InvalidState(x)),
    }
}

/// Adjoint of the uncontrolled generator restricted to `(a, i, r, d)`.
///
/// `inflow_a` is the s -> a flux, which depends on the control and the mean
/// field and is supplied by the caller.
pub fn generator_adjoint_apply(agent: &AgentModel, rho: [f64; 4], inflow_a: f64) -> [f64; 4] {
    let [a, i, _r, _d] = rho;
    [
        inflow_a - agent.lambda_ai * a,
        agent.lambda_ai * a - agent.removal_rate() * i,
        agent.lambda_ir * i,
        agent.lambda_id * i,
    ]
}

/// Basic reproduction number for constant activity `beta_bar` with everyone active.
pub fn compute_r0(agent: &AgentModel, beta_bar: f64) -> Result<f64> {
    let removal = agent.removal_rate();
    if removal <= 0.0 {
        return Err(Error::DegenerateRemoval);
    }
    let lai = agent.lambda_ai;
    let inv = lai * removal / (lai + removal);
    Ok(agent.lambda_sa * beta_bar / inv)
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
    fn canonical_params_validate() {
        assert!(ModelParams::canonical().validate().is_ok());
    }

    #[test]
    fn zero_discount_rejected() {
        let mut p = ModelParams::canonical();
        p.gamma = 0.0;
        assert_eq!(p.validate(), Err(ParamError::ZeroDiscount(0.0)));
    }

    #[test]
    fn large_negative_death_cost_rejected() {
        let mut p = ModelParams::canonical();
        p.phi_d = -100.0;
        assert!(matches!(p.validate(), Err(ParamError::NonpositivePhiI { .. })));
    }

    #[test]
    fn negative_rate_rejected() {
        let mut p = ModelParams::canonical();
        p.lambda_ir = -0.1;
        assert!(matches!(p.validate(), Err(ParamError::NegativeRate { .. })));
    }

    #[test]
    fn pmf_and_override_checks() {
        let mut p = ModelParams::canonical();
        p.attributes = vec![Attribute { id: "young".into(), weight: 0.6 }, Attribute { id: "old".into(), weight: 0.5 }];
        assert!(matches!(p.clone().validate(), Err(ParamError::PmfNotNormalized(_))));
        p.attributes[1].weight = 0.4;
        p.overrides.insert("nobody".into(), RateOverrides::default());
        assert_eq!(p.clone().validate(), Err(ParamError::UnknownAttribute("nobody".into())));
        p.overrides.clear();
        p.overrides.insert("old".into(), RateOverrides { lambda_ir: Some(0.2), ..Default::default() });
        let p = p.validate().unwrap();
        assert_eq!(p.agent(1).lambda_ir, 0.2);
        assert_eq!(p.agent(0).lambda_ir, 0.4);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let bad = r#"{"lambda_sa":1,"lambda_ai":2,"lambda_ir":0.4,"lambda_id":0.1,"gamma":0.1,"bogus":1}"#;
        assert!(serde_json::from_str::<ModelParams>(bad).is_err());
        let good = r#"{"lambda_sa":1,"lambda_ai":2,"lambda_ir":0.4,"lambda_id":0.1,"gamma":0.1}"#;
        let p: ModelParams = serde_json::from_str(good).unwrap();
        assert_eq!(p, ModelParams::canonical());
    }

    #[test]
    fn running_cost_table() {
        let m = p0();
        assert_abs_diff_eq!(running_cost(&m, EpiState::S, 1.0, 0.5).unwrap(), -0.5);
        assert_abs_diff_eq!(running_cost(&m, EpiState::A, 0.0, 0.7).unwrap(), 0.0);
        assert_abs_diff_eq!(running_cost(&m, EpiState::I, 1.0, 0.5).unwrap(), 1.5);
        assert!(matches!(running_cost(&m, EpiState::R, 1.0, 0.5), Err(Error::InvalidState(EpiState::R))));
        assert!(running_cost(&m, EpiState::D, 0.0, 0.5).is_err());
    }

    #[test]
    fn adjoint_examples() {
        let m = p0();
        assert_eq!(generator_adjoint_apply(&m, [1.0, 0.0, 0.0, 0.0], 0.0), [-2.0, 2.0, 0.0, 0.0]);
        let out = generator_adjoint_apply(&m, [0.0, 1.0, 0.0, 0.0], 0.0);
        for (o, e) in out.iter().zip([0.0, -0.5, 0.4, 0.1]) {
            assert_abs_diff_eq!(*o, e, epsilon = 1e-15);
        }
        assert_eq!(generator_adjoint_apply(&m, [0.0, 0.0, 0.5, 0.5], 0.0), [0.0; 4]);
    }

    #[test]
    fn r0_examples() {
        let m = p0();
        assert_abs_diff_eq!(compute_r0(&m, 1.0).unwrap(), 2.5, epsilon = 1e-12);
        assert_eq!(compute_r0(&m, 0.0).unwrap(), 0.0);
        assert_abs_diff_eq!(compute_r0(&m, 0.4).unwrap(), 1.0, epsilon = 1e-12);
        let mut d = m.clone();
        d.lambda_ir = 0.0;
        d.lambda_id = 0.0;
        assert!(matches!(compute_r0(&d, 1.0), Err(Error::DegenerateRemoval)));
    }

    proptest! {
        #[test]
        fn adjoint_conserves_probability(a in 0.0..1.0f64, i in 0.0..1.0f64, r in 0.0..1.0f64, d in 0.0..1.0f64,
                                         lai in 0.0..10.0f64, lir in 0.0..5.0f64, lid in 0.0..5.0f64) {
            let mut m = p0();
            m.lambda_ai = lai;
            m.lambda_ir = lir;
            m.lambda_id = lid;
            let s: f64 = generator_adjoint_apply(&m, [a, i, r, d], 0.0).iter().sum();
            prop_assert!(s.abs() < 1e-12);
        }

        #[test]
        fn running_cost_affine_in_u(alpha in 0.0..1.0f64, u in 0.0..1.0f64) {
            let m = p0();
            for x in [EpiState::S, EpiState::A, EpiState::I] {
                let c0 = running_cost(&m, x, 0.0, alpha).unwrap();
                let c1 = running_cost(&m, x, 1.0, alpha).unwrap();
                let cu = running_cost(&m, x, u, alpha).unwrap();
                let ca = if x == EpiState::S { 0.0 } else { m.c_a };
                prop_assert!((c1 - c0 - (ca - alpha)).abs() < 1e-14);
                prop_assert!((cu - (c0 + u * (c1 - c0))).abs() < 1e-14);
            }
        }

        #[test]
        fn r0_homogeneous(beta in 0.0..1.0f64, k in 0.0..5.0f64) {
            let m = p0();
            let lhs = compute_r0(&m, k * beta).unwrap();
            let rhs = k * compute_r0(&m, beta).unwrap();
            prop_assert!((lhs - rhs).abs() < 1e-12 * (1.0 + rhs.abs()));
        }
    }
}
