use thiserror::Error;

use crate::tree::NodeId;

pub type Result<T, E = NestError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NestError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("node {0} not found")]
    NotFound(NodeId),

    #[error("unknown problem {0:?}")]
    UnknownProblem(String),

    /// A child was offered with a likelihood below its parent's threshold.
    /// This means the sampler that produced it is broken.
    #[error(
        "contract violation: child logL {child} below parent {parent} logL {parent_log_likelihood}"
    )]
    ContractViolation {
        parent: NodeId,
        parent_log_likelihood: f64,
        child: f64,
    },

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("sampling efficiency failure after {proposals} proposals ({evaluations} likelihood evaluations, {accepted} accepted)")]
    EfficiencyFailure {
        proposals: u64,
        evaluations: u64,
        accepted: u64,
    },

    #[error("stuck walker: slice bracket collapsed to {width:e} without acceptance")]
    StuckWalker { width: f64 },

    #[error("plateau detected: live points {ids:?} share log-likelihood {log_likelihood}")]
    PlateauDetected {
        ids: Vec<NodeId>,
        log_likelihood: f64,
    },

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Serde(String),
}

impl NestError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        NestError::InvalidArgument(msg.into())
    }
}

impl From<serde_json::Error> for NestError {
    fn from(e: serde_json::Error) -> Self {
        NestError::Serde(e.to_string())
    }
}
