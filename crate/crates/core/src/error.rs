use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },

    #[error("line {line}: out-of-order timestamp {time} after {previous}")]
    OutOfOrder { line: usize, time: f64, previous: f64 },

    #[error("trace contains no packets")]
    EmptyTrace,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("not enough data: {0}")]
    InsufficientData(String),

    #[error("weights sum to {0}, expected 1")]
    WeightSum(f64),

    #[error("identity check failed: set-side {set_side} vs output-side {output_side}")]
    IdentityViolation { set_side: f64, output_side: f64 },

    #[error("acceptance check failed: {0}")]
    Violation(String),

    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),

    #[error("artifact {path} was produced by config {found}, current config is {expected}")]
    ConfigMismatch {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("bad model container: {0}")]
    Container(String),

    #[error("external predictor: {0}")]
    External(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::InvalidArgument(_) | Error::MissingArtifact(_) | Error::ConfigMismatch { .. }
        )
    }

    pub fn is_violation(&self) -> bool {
        matches!(self, Error::Violation(_) | Error::IdentityViolation { .. })
    }

    /// Process exit status: 1 for usage errors, 3 for failed acceptance
    /// checks, 2 for everything else (bad or insufficient data).
    pub fn exit_code(&self) -> i32 {
        if self.is_usage() {
            1
        } else if self.is_violation() {
            3
        } else {
            2
        }
    }
}
