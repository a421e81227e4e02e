//! Neuron-wise preconditioned training of two-layer ReLU networks.
//!
//! Preconditioners are powers of the input covariance `Σ = XXᵀ` or
//! diagonal-Hessian approximations; the `runners` module drives the
//! experiment sweeps and `verify` holds executable checks of the exact
//! identities the update rules rely on.

pub mod cli;
pub mod data;
pub mod error;
pub mod model;
pub mod optim;
pub mod runners;
pub mod spectra;
pub mod verify;

pub use error::{LabError, Result};
