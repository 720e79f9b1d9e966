//! Experiment runner behind the `pdelab` binary: configs, CSV emission and
//! the complexity benchmark.

pub mod bench;
pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Outcome, RunOptions};
pub use config::{Command, ExperimentConfig};
pub use error::{CliError, Result};

/// Environment variable that switches on deterministic mode when set to `1`.
pub const DETERMINISTIC_ENV: &str = "PDELAB_DETERMINISTIC";

pub fn deterministic_from_env() -> bool {
    std::env::var(DETERMINISTIC_ENV).is_ok_and(|v| v == "1")
}

/// Twelve significant digits in scientific notation.
pub fn fmt_num(x: f64) -> String {
    // normalise -0.0 so equal values print identically
    let x = if x == 0.0 { 0.0 } else { x };
    format!("{x:.11e}")
}
