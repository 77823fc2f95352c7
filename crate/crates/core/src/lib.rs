//! Entirely monotone and Hardy-Krause variation constrained least squares.
//!
//! The two estimators fit rectangular piecewise constant functions
//! `f = sum_j beta_j 1[z_j, 1]` to data observed at design points in `[0, 1]^d`:
//!
//! - the entirely monotone LSE solves a least squares problem with
//!   `beta_j >= 0` for every non-intercept coefficient;
//! - the Hardy-Krause (anchored at the origin) denoiser bounds
//!   `sum_{j >= 2} |beta_j| <= V`.
//!
//! [`design`] builds the binary design matrix, [`solvers`] runs projected
//! accelerated gradient on it, [`estimators`] wraps both into fitted models,
//! [`variation`] measures quasi-volumes and variations and [`sim`] holds the
//! simulation harness.

pub mod design;
pub mod error;
pub mod estimators;
pub mod lattice;
pub mod sim;
pub mod solvers;
pub mod variation;

pub use error::{Error, Result};
pub use lattice::{LatticeGrid, MultiIndex, Point, Tensor};
