//! Bayesian token-level credit assignment for group-based policy gradients.
//!
//! The crate covers the evidence recursion and its advantage forms, the
//! reference estimators it is compared against, small enumerable token
//! environments with exact posteriors, a tabular clipped-surrogate trainer,
//! an offline JSON-lines scorer, and the diagnostics used to check all of it.

pub mod analysis;
pub mod baselines;
pub mod batch;
pub mod config;
pub mod error;
pub mod evidence;
pub mod experiment;
pub mod interop;
pub mod par;
pub mod stats;
pub mod synth;
pub mod trainer;
pub mod verify;

pub use config::{EstimatorConfig, OracleMode, Variant};
pub use error::{CreditError, Result};
