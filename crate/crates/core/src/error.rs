use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unknown {what} `{name}`")]
    Unknown { what: &'static str, name: String },

    #[error("task has {n_blocks} blocks; enumeration is limited to {max}")]
    TooManyBlocks { n_blocks: usize, max: usize },

    #[error("evidence normalizer {0:e} is degenerate")]
    DegenerateEvidence(f64),

    #[error("intervention limit of {limit} reached")]
    LimitReached { limit: usize },

    #[error("malformed log for participant `{participant}`: event {position} is invalid: {reason}")]
    MalformedLog {
        participant: String,
        position: usize,
        reason: String,
    },

    #[error("need at least {needed} units for cross-validation, got {got}")]
    TooFewUnits { needed: usize, got: usize },

    #[error("{} log line(s) rejected, first: {}", .0.len(), .0[0])]
    Rejected(Vec<LineDiagnostic>),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// A problem with one line of an input file, numbered from 1.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct LineDiagnostic {
    pub line: usize,
    pub message: String,
}

impl std::fmt::Display for LineDiagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "line {}: {}", self.line, self.message)
    }
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
