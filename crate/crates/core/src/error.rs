use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("vector has zero norm")]
    ZeroVector,
    #[error("vector has a non-finite component at index {index}")]
    NonFinite { index: usize },
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimMismatch { expected: usize, found: usize },
    #[error("format error in {path}: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("duplicate entry id {0}")]
    DuplicateId(u64),
    #[error("unknown entry id {0}")]
    UnknownId(u64),
    #[error("memory is empty")]
    EmptyMemory,
    #[error("memory has {have} entries, operation needs at least {need}")]
    MemoryTooSmall { need: usize, have: usize },
    #[error("index was built for memory generation {index}, memory is at generation {memory}")]
    StaleIndex { index: u64, memory: u64 },
    #[error("neighbor set is empty")]
    EmptyNeighborSet,
    #[error("reliability report was computed for memory generation {report}, memory is at generation {memory}")]
    StaleReport { report: u64, memory: u64 },
    #[error("invalid pruning threshold {0}")]
    InvalidThreshold(u32),
    #[error("sample is empty")]
    EmptySample,
    #[error("taxonomy node '{0}' has no examples in memory")]
    EmptyCandidate(String),
    #[error("taxonomy node '{0}' has no children")]
    NoChildren(String),
    #[error("invalid taxonomy: {0}")]
    InvalidTaxonomy(String),
    #[error("fit is degenerate: {0}")]
    DegenerateFit(String),
    #[error("residual vector is degenerate (norm {norm:.3e})")]
    DegenerateResidual { norm: f64 },
    #[error("invalid fixture spec: {0}")]
    InvalidSpec(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

impl Error {
    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
