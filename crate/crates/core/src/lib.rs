//! Online FIR identification with a tuned/correlated kernel prior and
//! one-step marginal-likelihood hyperparameter updates.

pub mod cli;
pub mod error;
pub mod estimator;
pub mod kernel;
pub mod likelihood;
pub mod optim;
pub mod simgen;
pub mod stats;

pub use error::{Result, SysIdError};
pub use kernel::Hyperparameters;
