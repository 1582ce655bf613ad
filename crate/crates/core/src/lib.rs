//! Sliced optimal transport distances with amortized slice selection.
//!
//! The crate covers 1-D closed-form transport, Monte-Carlo sliced,
//! max-sliced and projection-robust Wasserstein estimators, amortized models
//! that predict a slice from a mini-batch pair, their analytic gradients, a
//! minimax trainer for small generators, exact oracles and a timing harness.

pub mod amortized;
pub mod cli;
pub mod datasets;
pub mod error;
pub mod eval;
pub mod grad;
pub mod linalg;
pub mod measures;
pub mod params;
pub mod rng;
pub mod slicers;
pub mod trainer;

pub use error::{Error, Result};
pub use measures::{Direction, EmpiricalMeasure, Order};
