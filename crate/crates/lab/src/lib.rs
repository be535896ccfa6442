//! Experiment harness: configuration, training runs, evaluation, theory
//! checks and plot data.

pub mod config;
pub mod error;
pub mod eval;
pub mod plot;
pub mod runner;
pub mod stats;
pub mod theory;

pub use config::{load_runs, parse_runs, Run, RunConfig};
pub use error::{LabError, Result};
