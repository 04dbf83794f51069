//! Flow-map surrogate learning and Bayesian source inversion for a two
//! dimensional SO₂ dispersion model.
//!
//! The pipeline runs in stages:
//!
//! 1. [`dispersion`] simulates the advection-diffusion-reaction model for a
//!    given source magnitude history and wind field.
//! 2. [`reduction`] fits PCA bases for state and wind snapshots.
//! 3. [`flownet`] trains a residual network that advances reduced states one
//!    time step.
//! 4. [`observe`] composes the network into a parameter-to-observable map with
//!    matrix-free Jacobian actions.
//! 5. [`bayes`] estimates approximation-error statistics for the uncertain
//!    wind, computes MAP points and draws Laplace posterior samples.
//! 6. [`experiments`] wires the stages into the reported studies and
//!    [`io`] persists every artifact.

pub mod bayes;
pub mod config;
pub mod dispersion;
pub mod error;
pub mod experiments;
pub mod flownet;
pub mod io;
pub mod linalg;
pub mod observe;
pub mod pipeline;
pub mod reduction;

pub use error::{Error, Result};
