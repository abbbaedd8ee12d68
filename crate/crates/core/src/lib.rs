//! Weak and strong sensitivities of expected-utility maximization in
//! Brownian markets.
//!
//! The crate estimates, by Monte Carlo over seeded Brownian ensembles, the
//! optimal expected utility of a Samuelson market when its coefficients are
//! perturbed either inside the wealth dynamics ("strong") or through a
//! Girsanov change of measure ("weak"), and evaluates the closed-form weak
//! directional derivatives against finite differences and exact oracles.
//!
//! Modules:
//!
//! - [`market`]: coefficients, market price of risk, kernel stability.
//! - [`paths`]: Brownian ensembles, Itô sums, stochastic exponentials.
//! - [`utility`]: power, log and tabulated utilities.
//! - [`solver`]: optimal terminal wealth and closed-form values.
//! - [`valuation`]: weak and strong value estimators.
//! - [`sensitivity`]: derivative formulas, finite differences, diagnostics.
//! - [`modular`]: modular functionals, Luxemburg/Amemiya norms, Hölder check.
//! - [`danskin`]: support functions of point clouds and their directional derivatives.
//!
//! With the default `parallel` feature, path loops run on the current rayon
//! pool; results are identical for any number of workers.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod danskin;
pub mod error;
pub mod estimate;
pub mod exec;
mod field;
pub mod market;
pub mod modular;
pub mod paths;
pub mod sensitivity;
pub mod solver;
pub mod utility;
pub mod valuation;

pub use error::{Error, Result};
pub use estimate::{Estimate, ValueEstimate};
pub use field::NodeField;
pub use market::{CoefficientProcess, MarketModel, PerturbationSpec, Shape};
pub use paths::{BrownianPath, PathEnsemble, PathFunctional, TimeGrid};
pub use utility::UtilitySpec;
pub use sensitivity::{Direction, SensitivityReport};
pub use solver::OptimalWealth;
pub use valuation::{strong_value, value_surface, weak_value};
