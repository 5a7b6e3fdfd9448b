//! Process-level error classification.
//!
//! Every failure a command can hit maps onto one of three exit codes:
//!
//! * `2` — usage and validation: bad flags, bad config keys or values,
//!   parameter combinations a module rejects before any work starts.
//! * `3` — data: files that are missing, unreadable, or malformed.
//! * `4` — runtime: failures while executing an otherwise valid run.
//!
//! Success is exit code `0`. Clap's own parse errors also exit with `2`,
//! matching the usage class.

use luminav_core::confidence::ConfidenceError;
use luminav_core::metrics::MetricsError;
use luminav_core::retrieval::RetrievalError;
use luminav_core::sim::SimError;
use std::fmt::Display;
use thiserror::Error;

pub const EXIT_USAGE: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_RUNTIME: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data(_) => EXIT_DATA,
            CliError::Runtime(_) => EXIT_RUNTIME,
        }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn data(message: impl Into<String>) -> Self {
        CliError::Data(message.into())
    }

    pub fn runtime(message: impl Into<String>) -> Self {
        CliError::Runtime(message.into())
    }
}

/// Input and output files live in the data class: the message already names
/// the path and, for text formats, the offending line.
impl From<luminav_core::io::IoError> for CliError {
    fn from(error: luminav_core::io::IoError) -> Self {
        CliError::Data(error.to_string())
    }
}

/// For errors that are always parameter validation (camera intrinsics, RANSAC
/// and gate policies, noise models rejected before a run starts).
pub fn usage_of(error: impl Display) -> CliError {
    CliError::Usage(error.to_string())
}

/// For errors that only occur mid-run on inputs that already validated.
pub fn runtime_of(error: impl Display) -> CliError {
    CliError::Runtime(error.to_string())
}

/// Simulator errors split by origin: configuration and route problems are
/// usage errors, ray-casting failures happen mid-run.
pub fn classify_sim(error: SimError) -> CliError {
    match &error {
        SimError::InvalidConfig { .. }
        | SimError::InvalidModel { .. }
        | SimError::InvalidRoute { .. } => CliError::Usage(error.to_string()),
        SimError::PoseOutsideLumen | SimError::Solver(_) | SimError::Augment(_) => {
            CliError::Runtime(error.to_string())
        }
    }
}

/// Retrieval errors split by origin: a window that cannot fit the database is
/// a usage error, everything else means the stored descriptors are bad.
pub fn classify_retrieval(error: RetrievalError) -> CliError {
    match &error {
        RetrievalError::InvalidRange { .. } | RetrievalError::EmptyDatabase => {
            CliError::Usage(error.to_string())
        }
        _ => CliError::Data(error.to_string()),
    }
}

/// Gate-loop errors: a bad policy is usage, a trainer abort (or an internal
/// phase violation) is a runtime failure.
pub fn classify_confidence(error: ConfidenceError) -> CliError {
    match &error {
        ConfidenceError::InvalidPolicy { .. } => CliError::Usage(error.to_string()),
        _ => CliError::Runtime(error.to_string()),
    }
}

/// Metric errors raised while comparing already-loaded trajectories: bad
/// `delta`/`keep` parameters are usage errors, mismatched or degenerate
/// trajectories are data errors.
pub fn classify_metrics(error: MetricsError) -> CliError {
    match &error {
        MetricsError::InvalidDelta | MetricsError::InvalidKeepFraction { .. } => {
            CliError::Usage(error.to_string())
        }
        _ => CliError::Data(error.to_string()),
    }
}
