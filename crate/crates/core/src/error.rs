use std::path::PathBuf;

use thiserror::Error;

use crate::model::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {}", format_violations(.0))]
    InvalidConfig(Vec<Violation>),

    #[error("VM {vm} is unstable (rho = {rho:.6})")]
    VmUnstable { vm: usize, rho: f64 },

    #[error("networking queue is unstable at priority level {level} (cumulative rho = {cumulative_rho:.6})")]
    NetworkUnstable { level: usize, cumulative_rho: f64 },

    #[error("no stable schedule exists: compute pool demand {demand:.6} exceeds capacity {capacity:.6}")]
    Infeasible { demand: f64, capacity: f64 },

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("scripted job {job} references unknown VM {vm}")]
    UnknownVm { job: usize, vm: usize },

    #[error("{path}:{line}: {message}")]
    Trace {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{0}")]
    Parse(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for errors caused by user input rather than internal failures.
    pub fn is_user_error(&self) -> bool {
        !matches!(self, Error::Io(_))
    }
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
