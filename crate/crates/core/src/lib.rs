//! Mean-field game solvers for epidemic models with fully and partially
//! observed agents.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod filter;
pub mod fpk;
pub mod fully_observed;
pub mod grid;
pub mod hjb;
pub mod mc;
pub mod mean_field;
pub mod mfe;
pub mod model;
pub mod output;
pub mod stationary;

pub use error::{Error, ParamError, Result};
pub use grid::{BeliefGrid, Field, PolicyField, TimeGrid, ValueField};
pub use mean_field::{mfe_residual, MeanFieldPath};
pub use model::{AgentModel, Attribute, EpiState, ModelParams, RateOverrides};
