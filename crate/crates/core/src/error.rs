use thiserror::Error;

/// Errors raised while validating model parameters.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ParamError {
    #[error("rate `{name}` is negative ({value}); all transition rates must be >= 0")]
    NegativeRate { name: String, value: f64 },
    #[error("discount rate gamma = {0} must be strictly positive (the gamma = 0 problem is ill-posed)")]
    ZeroDiscount(f64),
    #[error("attribute weights sum to {0}, expected 1 within 1e-12")]
    PmfNotNormalized(f64),
    #[error("attribute weight for `{id}` is negative ({weight})")]
    NegativeWeight { id: String, weight: f64 },
    #[error("phi_bar(i) = {value} for attribute `{theta}` is not positive; infection must cost more than isolation")]
    NonpositivePhiI { theta: String, value: f64 },
    #[error("rate override references undeclared attribute `{0}`")]
    UnknownAttribute(String),
    #[error("attribute `{0}` declared more than once")]
    DuplicateAttribute(String),
    #[error("at least one attribute must be declared")]
    NoAttributes,
    #[error("parameter `{0}` is not finite")]
    NonFinite(String),
}

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("running cost is undefined in terminal state {0:?}")]
    InvalidState(crate::model::EpiState),
    #[error("removal rate lambda_ir + lambda_id is zero; R0 is undefined")]
    DegenerateRemoval,
    #[error("mean-field path invalid: {0}")]
    InvalidMeanField(String),
    #[error("grids do not match: {0}")]
    GridMismatch(String),
    #[error("time step {dt} violates the CFL bound {limit}")]
    CflViolation { dt: f64, limit: f64 },
    #[error("ODE step rejected at t = {t}: {reason}")]
    StepUnstable { t: f64, reason: String },
    #[error("iteration did not converge after {iters} iterations (last residual {last_residual:e})")]
    NotConverged { iters: usize, last_residual: f64, history: Vec<f64> },
    #[error("mass drift {drift:e} exceeds tolerance {tol:e}")]
    MassDriftExceeded { drift: f64, tol: f64 },
    #[error("cumulative negativity clip {clipped:e} exceeds {limit:e}")]
    ClipBudgetExceeded { clipped: f64, limit: f64 },
    #[error("closed form undefined at a = {0}")]
    DomainError(f64),
    #[error("hypothesis violated: {0}")]
    HypothesisViolated(String),
    #[error("simulation step too coarse: max jump probability {max_prob} > 0.1")]
    StepTooCoarse { max_prob: f64 },
    #[error("empty belief sample")]
    EmptySample,
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
