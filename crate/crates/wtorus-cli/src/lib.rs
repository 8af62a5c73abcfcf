//! Batch experiment runner around the `wtorus` library: JSON-configured
//! elliptic solves, convergence and homogenization ladders, random-medium
//! coefficient fits, and particle-system hydrodynamics, all written as
//! deterministic CSV/JSON artifacts with a run manifest.

pub mod config;
pub mod error;
pub mod runner;

pub use error::CliError;
pub use runner::{execute, parallel_hydro_report, RunOutcome};
