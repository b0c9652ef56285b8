use thiserror::Error;

use crate::change::ChangeHash;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EngineError {
    #[error("malformed change: {0}")]
    Malformed(String),
    #[error("hash mismatch: claimed {claimed}, computed {computed}")]
    HashMismatch { claimed: ChangeHash, computed: ChangeHash },
    #[error("invalid change {hash}: {reason}")]
    InvalidChange { hash: ChangeHash, reason: String },
    #[error("unknown change hash {0}")]
    UnknownHash(ChangeHash),
    #[error("nothing to commit")]
    EmptyCommit,
    #[error("actor 0 is reserved for genesis")]
    ReservedActor,
}

/// Errors surfaced by the key-value layer and the node. Each maps to a wire
/// error code.
#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error("malformed request: {0}")]
    Malformed(String),
    #[error("revision {requested} is newer than current revision {current}")]
    FutureRevision { requested: u64, current: u64 },
    #[error("unknown lease {0}")]
    UnknownLease(u64),
    #[error("operation not supported in {0} mode")]
    ModeUnsupported(&'static str),
    #[error("unknown watch {0}")]
    UnknownWatch(u64),
    #[error("durability failure: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn code(&self) -> &'static str {
        match self {
            Error::Engine(EngineError::UnknownHash(_)) => "unknown_hash",
            Error::Engine(_) | Error::Malformed(_) | Error::UnknownWatch(_) => "malformed",
            Error::FutureRevision { .. } => "future_revision",
            Error::UnknownLease(_) => "unknown_lease",
            Error::ModeUnsupported(_) => "mode_unsupported",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
