//! Ingestion, synthetic data, and command-line entry points for the epigam
//! pipelines.

pub mod commands;
pub mod error;
pub mod io;
pub mod output;
pub mod synth;

pub use error::{CliError, Issue};

/// Worker threads from `EPIGAM_THREADS`, default 1.
pub fn thread_count() -> Result<usize, CliError> {
    match std::env::var("EPIGAM_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(CliError::Usage(format!("EPIGAM_THREADS must be a positive integer, got '{v}'"))),
        },
    }
}
