//! Continuous-time Extended Kalman Filter with contraction-based stability
//! certificates.
//!
//! The crate integrates the EKF state/Riccati pair, evaluates the contraction
//! matrix of the associated virtual observer, sizes the region in which that
//! observer contracts, and checks the resulting rates and envelopes against
//! simulated trajectories.
//!
//! Module map:
//! - [`model`]: plant definitions, Jacobians, sampled Hessian-norm bounds
//! - [`ekf`]: Riccati right-hand side, gain, fixed-step filter integration
//! - [`contraction`]: contraction matrix, region radii, certificates, rate tables
//! - [`sim`]: truth, virtual, twin and perturbed trajectories, decay fits
//! - [`bench`]: registry of benchmark plants with closed-form reference data
//! - [`cli`]: batch campaigns behind the `ekfc` binary

// `!(x > 0.0)` is used on purpose so NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod bench;
pub mod cli;
pub mod contraction;
pub mod ekf;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ode;
pub mod sim;

pub use error::{Error, Result};
