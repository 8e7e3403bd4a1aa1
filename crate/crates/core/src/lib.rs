//! Conformal risk control for machine-unlearning hyperparameter selection.
//!
//! Scores unlearning configurations from forget/retain metrics, turns the
//! scores into distribution-free upper bounds and selects the configurations
//! whose bound stays under a target level.

pub mod cli;
pub mod conformal;
pub mod controller;
pub mod error;
pub mod risk_model;
pub mod simulator;
pub mod store;

pub use error::{FrocError, Result};
