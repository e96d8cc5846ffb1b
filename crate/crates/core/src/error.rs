use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad header: {0}")]
    Header(String),
    #[error("line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("box {box_id}: {message}")]
    Validation { box_id: String, message: String },
    #[error("duplicate box id {box_id} (line {line})")]
    DuplicateBox { box_id: String, line: u64 },
    #[error("unknown candidate {0:?}")]
    UnknownCandidate(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("insufficient data: {got} boxes usable, at least {needed} required")]
    InsufficientData { needed: usize, got: usize },
    #[error("degenerate grouping: {0}")]
    DegenerateGroups(String),
    #[error("profile has no envelope to compare against")]
    MissingEnvelope,
    #[error("only {matched} of {total} boxes matched between rounds; are these the same election?")]
    PoorMatch { matched: usize, total: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad input data or arguments, as opposed to
    /// failures of the machinery itself.
    pub fn is_validation(&self) -> bool {
        match self {
            Error::Io { source, .. } => source.kind() == std::io::ErrorKind::NotFound,
            _ => true,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
