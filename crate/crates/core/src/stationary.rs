//! Closed-form stationary solution of the belief HJB for constant mean-field
//! terms, threshold constants, and the checks that certify them.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::filter::integrate_filter;
use crate::fully_observed::{beta_crit, phi_bar_a, phi_bar_i};
use crate::grid::{BeliefGrid, TimeGrid};
use crate::hjb::{solve_stationary_hjb, StationaryOptions};
use crate::model::AgentModel;

/// Strict inequalities in the validity test must hold with this margin.
pub const VALIDITY_MARGIN: f64 = 1e-12;

/// Constants of the threshold-type stationary solution.
///
/// Below `a_thresh` the value is affine, `k (a - 1) + y`; above it the value
/// is `phi_a a + c (1 - a)^(1 + b) a^(-b)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdConstants {
    pub beta_bar: f64,
    pub alpha_bar: f64,
    pub phi_i: f64,
    pub phi_a: f64,
    pub b: f64,
    pub y: f64,
    pub k: f64,
    pub a_thresh: f64,
    pub c: f64,
    /// Stable filter equilibrium `lambda_sa beta / lambda_ai` under full activity.
    pub a_bar: f64,
    /// `None` when `alpha_bar <= lambda_sa beta_bar phi_i`.
    pub lambda_ai_lower: Option<f64>,
    /// Bound that does imply the key inequality; `None` under the same condition.
    pub lambda_ai_sufficient: Option<f64>,
    /// Sufficient inequality on `lambda_ai` for the threshold ordering.
    pub step2_key: bool,
    /// `beta_bar < alpha_bar / (lambda_sa phi_i)`, `lambda_ai > lambda_sa beta_bar`
    /// and `0 < a_bar < a_thresh < 1`, all with margin.
    pub valid: bool,
}

fn ln_homogeneous(a: f64, b: f64) -> f64 {
    (1.0 + b) * (1.0 - a).ln() - b * a.ln()
}

pub fn threshold_constants(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<ThresholdConstants> {
    let phi_i = phi_bar_i(m)?;
    let phi_a = phi_bar_a(m)?;
    let (lai, g) = (m.lambda_ai, m.gamma);
    let x = m.lambda_sa * beta_bar;
    let b = g / lai;
    let y = (lai * phi_i + m.c_a - alpha_bar) / (lai + g);
    let k = (g * y + alpha_bar) / (x + g);
    let xk = x * k;
    let a_thresh = (alpha_bar - xk) / (m.c_a - xk);
    // (1 - a)^b a^(-b-1) (b + a) at the threshold, in log space.
    let denom = if a_thresh > 0.0 && a_thresh < 1.0 {
        (b * (1.0 - a_thresh).ln() - (b + 1.0) * a_thresh.ln()).exp() * (b + a_thresh)
    } else {
        f64::NAN
    };
    let c = (phi_a - k) / denom;
    let a_bar = x / lai;
    let lambda_ai_lower = lambda_ai_lower_bound(m, beta_bar, alpha_bar).ok();
    let lambda_ai_sufficient = lambda_ai_sufficient_bound(m, beta_bar, alpha_bar).ok();
    let step2_key = step2_key_inequality(m, beta_bar, alpha_bar)?;
    let mg = VALIDITY_MARGIN;
    let valid = alpha_bar - x * phi_i > mg
        && lai > x + mg
        && a_bar > mg
        && a_thresh > a_bar + mg
        && a_thresh < 1.0 - mg
        && c.is_finite();
    Ok(ThresholdConstants {
        beta_bar,
        alpha_bar,
        phi_i,
        phi_a,
        b,
        y,
        k,
        a_thresh,
        c,
        a_bar,
        lambda_ai_lower,
        lambda_ai_sufficient,
        step2_key,
        valid,
    })
}

/// Lower bound on `lambda_ai` in the form
/// `max(x, x gamma/((2 - alpha) gamma + x) + x gamma/(alpha - x phi_i))`, `x = lambda_sa beta_bar`.
///
/// This bound is nondecreasing in `beta_bar` and vanishes at 0, but it does
/// not imply the key inequality in general; see [`lambda_ai_sufficient_bound`].
pub fn lambda_ai_lower_bound(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<f64> {
    let phi_i = phi_bar_i(m)?;
    let x = m.lambda_sa * beta_bar;
    let g = m.gamma;
    let gap = alpha_bar - x * phi_i;
    if gap <= 0.0 {
        return Err(Error::HypothesisViolated(format!("alpha_bar - lambda_sa beta_bar phi_i = {gap} is not positive")));
    }
    if x == 0.0 {
        return Ok(0.0);
    }
    Ok(x.max(x * g / ((2.0 - alpha_bar) * g + x) + x * g / gap))
}

/// Bound obtained by solving the strengthened inequality
/// `((1 - alpha) + (x + gamma)/gamma) / (lambda_ai - x) < alpha / x - phi_i` for `lambda_ai`,
/// with `x = lambda_sa beta_bar`: `lambda_ai > x + x ((2 - alpha) gamma + x) / (gamma (alpha - x phi_i))`.
///
/// Unlike [`lambda_ai_lower_bound`], exceeding this bound does imply the key inequality.
pub fn lambda_ai_sufficient_bound(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<f64> {
    let phi_i = phi_bar_i(m)?;
    let x = m.lambda_sa * beta_bar;
    let g = m.gamma;
    let gap = alpha_bar - x * phi_i;
    if gap <= 0.0 {
        return Err(Error::HypothesisViolated(format!("alpha_bar - lambda_sa beta_bar phi_i = {gap} is not positive")));
    }
    Ok(x + x * ((2.0 - alpha_bar) * g + x) / (g * gap))
}

/// `(1 - alpha)/(lambda_ai + gamma) + (x + gamma)/((lambda_ai - x) gamma)
///   < alpha / x - lambda_ai phi_i / (lambda_ai + gamma)` with `x = lambda_sa beta_bar`,
/// required together with `lambda_ai > x`.
pub fn step2_key_inequality(m: &AgentModel, beta_bar: f64, alpha_bar: f64) -> Result<bool> {
    let phi_i = phi_bar_i(m)?;
    let (lai, g) = (m.lambda_ai, m.gamma);
    let x = m.lambda_sa * beta_bar;
    if !(lai > x) || x <= 0.0 {
        return Ok(false);
    }
    let lhs = (1.0 - alpha_bar) / (lai + g) + (x + g) / ((lai - x) * g);
    let rhs = alpha_bar / x - lai * phi_i / (lai + g);
    Ok(lhs < rhs)
}

fn require_valid(c: &ThresholdConstants) -> Result<()> {
    if c.valid {
        Ok(())
    } else {
        Err(Error::HypothesisViolated("threshold constants are not valid".into()))
    }
}

/// Piecewise closed-form stationary value.
pub fn stationary_value_closed_form(a: f64, c: &ThresholdConstants) -> Result<f64> {
    require_valid(c)?;
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::DomainError(a));
    }
    if a < c.a_thresh {
        return Ok(c.k * (a - 1.0) + c.y);
    }
    upper_value(a, c)
}

fn upper_value(a: f64, c: &ThresholdConstants) -> Result<f64> {
    if a <= 0.0 {
        return Err(Error::DomainError(a));
    }
    if a == 1.0 {
        return Ok(c.phi_a);
    }
    Ok(c.phi_a * a + c.c * ln_homogeneous(a, c.b).exp())
}

/// Derivative of the upper branch, `phi_a - c (1-a)^b a^(-b-1) (a + b)`.
fn upper_slope(a: f64, c: &ThresholdConstants) -> f64 {
    if a >= 1.0 {
        return c.phi_a;
    }
    let h = (c.b * (1.0 - a).ln() - (c.b + 1.0) * a.ln()).exp() * (a + c.b);
    c.phi_a - c.c * h
}

/// Slope of the closed-form value.
pub fn stationary_slope_closed_form(a: f64, c: &ThresholdConstants) -> Result<f64> {
    require_valid(c)?;
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::DomainError(a));
    }
    if a < c.a_thresh {
        Ok(c.k)
    } else {
        Ok(upper_slope(a, c))
    }
}

/// Switching function `M(a)` of the closed-form solution.
pub fn switching_closed_form(a: f64, c: &ThresholdConstants, m: &AgentModel) -> Result<f64> {
    let slope = stationary_slope_closed_form(a, c)?;
    Ok(m.lambda_sa * c.beta_bar * (1.0 - a) * slope + m.c_a * a - c.alpha_bar)
}

/// Closed-form stationary policy: active strictly below the threshold.
pub fn stationary_policy_closed_form(a: f64, c: &ThresholdConstants) -> u8 {
    u8::from(c.valid && a < c.a_thresh)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance, pass: value.abs() <= tolerance }
    }
    fn positive(name: &str, value: f64) -> Self {
        Self { name: name.into(), value, tolerance: 0.0, pass: value > 0.0 }
    }
    fn negative(name: &str, value: f64) -> Self {
        Self { name: name.into(), value, tolerance: 0.0, pass: value < 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum StationaryRegime {
    /// Active below a threshold belief.
    Threshold,
    /// Isolate at every belief (`beta_bar >= beta_crit`).
    Isolating,
    /// Between the two sufficient conditions; no closed form.
    Unresolved,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SwitchingReport {
    pub regime: StationaryRegime,
    pub checks: Vec<Check>,
    /// `M(1) = c_a - alpha_bar` is within 1e-6 of zero.
    pub near_degenerate: bool,
}

impl SwitchingReport {
    pub fn all_pass(&self) -> bool {
        self.regime != StationaryRegime::Unresolved && self.checks.iter().all(|c| c.pass)
    }
}

/// Verify the sign structure of `M` for the closed-form solution on
/// `probes` points per branch.
pub fn verify_switching(c: &ThresholdConstants, m: &AgentModel, probes: usize) -> Result<SwitchingReport> {
    let probes = probes.max(3);
    let m1 = m.c_a - c.alpha_bar;
    let near_degenerate = m1 < 1e-6;
    let mut checks = vec![Check::positive("m_at_one", m1)];
    if c.beta_bar >= beta_crit(m, c.alpha_bar)? {
        // Linear value phi_a a; M is affine.
        let x = m.lambda_sa * c.beta_bar;
        let min_m = (0..=probes)
            .map(|i| {
                let a = i as f64 / probes as f64;
                x * (1.0 - a) * c.phi_a + m.c_a * a - c.alpha_bar
            })
            .fold(f64::INFINITY, f64::min);
        checks.push(Check::positive("m_positive_everywhere", min_m));
        return Ok(SwitchingReport { regime: StationaryRegime::Isolating, checks, near_degenerate });
    }
    if !c.valid {
        return Ok(SwitchingReport { regime: StationaryRegime::Unresolved, checks, near_degenerate });
    }
    let x = m.lambda_sa * c.beta_bar;
    let th = c.a_thresh;
    let m_lower = x * (1.0 - th) * c.k + m.c_a * th - c.alpha_bar;
    let m_upper = x * (1.0 - th) * upper_slope(th, c) + m.c_a * th - c.alpha_bar;
    checks.push(Check::at_most("m_at_threshold", m_lower.abs().max(m_upper.abs()), 1e-8));
    let jump = (c.k * (th - 1.0) + c.y - upper_value(th, c)?).abs();
    checks.push(Check::at_most("value_continuity", jump, 1e-9));
    let below =
        (0..probes).map(|i| switching_closed_form(th * i as f64 / probes as f64, c, m)).collect::<Result<Vec<_>>>()?;
    checks.push(Check::negative("m_below_threshold", below.iter().cloned().fold(f64::NEG_INFINITY, f64::max)));
    let above = (1..=probes)
        .map(|i| switching_closed_form(th + (1.0 - th) * i as f64 / probes as f64, c, m))
        .collect::<Result<Vec<_>>>()?;
    checks.push(Check::positive("m_above_threshold", above.iter().cloned().fold(f64::INFINITY, f64::min)));
    let second = above.windows(3).map(|w| w[0] - 2.0 * w[1] + w[2]).fold(f64::INFINITY, f64::min);
    checks.push(Check::positive("m_convex_above", second));
    let identity = (c.b + th) * (m.c_a - x * c.k) - (c.k - c.phi_a) * m.gamma * (c.b + 1.0);
    checks.push(Check::at_most("step1_identity", identity, 1e-9));
    Ok(SwitchingReport { regime: StationaryRegime::Threshold, checks, near_degenerate })
}

/// One rung of the `lambda_ai` ladder.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case1Row {
    pub lambda_ai: f64,
    pub a_thresh: f64,
    pub valid: bool,
    /// First grid node where the PDE policy isolates.
    pub pde_threshold: Option<f64>,
    pub psi_at_zero: f64,
    /// Filter equilibrium reached from `a = 0` under the PDE policy.
    pub a_bar: f64,
    /// `a_bar lambda_ai / (lambda_sa beta_bar)`, which should approach `psi(0)`.
    pub a_bar_scaled: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Case1Report {
    pub rows: Vec<Case1Row>,
    /// Fully observed rule at `a = 0`: active iff `lambda_sa beta_bar phi_i < alpha_bar`.
    pub fully_observed_rule: u8,
    /// `psi(0)` matches the rule at the two largest rungs.
    pub policy_matches: bool,
    /// `|a_thresh - alpha_bar|` strictly decreases along the ladder.
    pub thresh_approaches_alpha: bool,
    /// Limit of `a_thresh` as `lambda_ai -> infinity`.
    pub a_thresh_limit: f64,
}

impl Case1Report {
    pub fn pass(&self) -> bool {
        self.policy_matches && self.thresh_approaches_alpha
    }
}

/// Solve the stationary HJB along an increasing `lambda_ai` ladder and compare
/// the policy at `a = 0` with the fully observed susceptible rule.
pub fn case1_limit_check(
    m: &AgentModel,
    beta_bar: f64,
    alpha_bar: f64,
    ladder: &[f64],
    grid: &BeliefGrid,
    opts: StationaryOptions,
) -> Result<Case1Report> {
    if ladder.windows(2).any(|w| w[1] <= w[0]) || ladder.is_empty() {
        return Err(Error::InvalidInput("lambda_ai ladder must be nonempty and increasing".into()));
    }
    let phi_i = phi_bar_i(m)?;
    let x = m.lambda_sa * beta_bar;
    let rule = u8::from(x * phi_i < alpha_bar);
    let mut rows = Vec::with_capacity(ladder.len());
    for &lai in ladder {
        let mut mm = m.clone();
        mm.lambda_ai = lai;
        let consts = threshold_constants(&mm, beta_bar, alpha_bar)?;
        let sol = solve_stationary_hjb(beta_bar, alpha_bar, grid, &mm, opts)?;
        let psi = sol.psi.clone();
        let g = *grid;
        let time = TimeGrid::covering(40.0 / lai, 0.01 / lai)?;
        let path = integrate_filter(&mm, 0.0, time, |_| beta_bar, |_, a| psi[g.nearest(a)])?;
        let a_bar = *path.a.last().unwrap_or(&0.0);
        rows.push(Case1Row {
            lambda_ai: lai,
            a_thresh: consts.a_thresh,
            valid: consts.valid,
            pde_threshold: sol.threshold(),
            psi_at_zero: sol.psi[0],
            a_bar,
            a_bar_scaled: if x > 0.0 { a_bar * lai / x } else { 0.0 },
        });
    }
    let policy_matches = rows.iter().rev().take(2).all(|r| r.psi_at_zero == f64::from(rule));
    let gaps: Vec<f64> = rows.iter().map(|r| (r.a_thresh - alpha_bar).abs()).collect();
    let thresh_approaches_alpha = gaps.windows(2).all(|w| w[1] < w[0]);
    let k_inf = (m.gamma * phi_i + alpha_bar) / (x + m.gamma);
    let a_thresh_limit = (alpha_bar - x * k_inf) / (m.c_a - x * k_inf);
    Ok(Case1Report { rows, fully_observed_rule: rule, policy_matches, thresh_approaches_alpha, a_thresh_limit })
}
