//! Numerical engine for pricing disability coverages in groups whose
//! disability rates depend on collective health claims.
//!
//! * [`model`]: states, hazards, payments and the disability preset.
//! * [`grid`]: triangular discretization and duration quadrature.
//! * [`solver`]: forward integro-differential solvers (classic, health,
//!   mean-field occupation and transition).
//! * [`valuation`]: expected cash flows and reserves.
//! * [`simulator`]: exact thinning simulation of the n-individual model.
//! * [`estimation`]: partial likelihoods and occurrence-exposure rates.

pub mod error;
pub mod estimation;
pub mod grid;
pub mod model;
pub mod simulator;
pub mod solver;
pub mod valuation;

pub use error::{Error, Result};
