//! Scenarios, Monte Carlo harness and command-line front end for the
//! distributed cubature Kalman filters.

pub mod cli;
pub mod montecarlo;
pub mod output;
pub mod scaling;
pub mod scenario;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("refusing to overwrite {0} (pass --overwrite)")]
    Exists(String),
    #[error(transparent)]
    Core(#[from] dckf_core::Error),
}
