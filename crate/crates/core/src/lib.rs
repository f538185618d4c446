//! Laboratory for model learning that matches policy gradients.
//!
//! The crate contrasts two ways of fitting a transition model inside a
//! model-based policy-gradient loop: matching the model's policy gradient to
//! the true one, and the conventional likelihood (KL) objective.
//!
//! - [`finite_mdp`]: exact tabular machinery (kernels, values, discounted
//!   state distributions).
//! - [`gradients`]: two-kernel policy gradients, finite differences,
//!   projected steps, stationarity.
//! - [`losses`]: exact and empirical gradient-matching losses, KL/TV norms,
//!   multi-step prediction loss.
//! - [`model_learning`]: projected-gradient model fitting and the MBRL loop.
//! - [`theory_checks`]: numerical verification of the error bounds and
//!   convergence constants.
//! - [`gmm_demo`]: one-dimensional mixture demo of differing minimizers.
//! - [`lqr`]: sampled-gradient track on a linear-quadratic system.

// `!(x > 0.0)` guards reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod finite_mdp;
pub mod gmm_demo;
pub mod gradients;
pub mod instances;
pub mod losses;
pub mod lqr;
pub mod model_learning;
pub mod seeding;
pub mod theory_checks;

pub use error::{Error, Result};
