//! Harness errors with stable process exit codes and machine-readable
//! JSON rendering for the CLI.

use serde::Serialize;
use thiserror::Error;
use triplet_core::CoreError;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid run configuration (bad values, impossible requests).
    #[error("config error: {0}")]
    Config(String),

    /// Malformed or missing input files.
    #[error("format error: {0}")]
    Format(String),

    /// A check subcommand ran to completion and found a violation.
    #[error("check failed: {0}")]
    CheckFailed(String),

    /// Training diverged or produced non-finite values.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Core(#[from] CoreError),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, HarnessError>;

impl HarnessError {
    pub fn config(msg: impl Into<String>) -> Self {
        HarnessError::Config(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        HarnessError::Format(msg.into())
    }
    pub fn check(msg: impl Into<String>) -> Self {
        HarnessError::CheckFailed(msg.into())
    }

    /// Stable exit code per error family. Code 2 is reserved for argument
    /// parsing (usage) errors, which the CLI layer reports directly.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 3,
            HarnessError::Format(_) | HarnessError::Io(_) => 4,
            HarnessError::CheckFailed(_) => 5,
            HarnessError::Numeric(_) => 6,
            HarnessError::Core(c) => match c {
                CoreError::Format(_) | CoreError::Io(_) => 4,
                CoreError::Numeric(_) => 6,
                _ => 3,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        match self.exit_code() {
            3 => "config",
            4 => "format",
            5 => "check-failed",
            6 => "numeric",
            _ => "internal",
        }
    }

    /// Machine-readable rendering for stderr.
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Rendered<'a> {
            error: &'a str,
            message: String,
            exit_code: i32,
        }
        serde_json::to_string(&Rendered {
            error: self.kind(),
            message: self.to_string(),
            exit_code: self.exit_code(),
        })
        .expect("error rendering is infallible")
    }
}
