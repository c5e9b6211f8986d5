use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, FetrError>;

/// Every failure the library can report.
///
/// The variants fall into two families that the CLI maps onto distinct exit
/// codes: data problems (malformed input, I/O, inconsistent shapes) and
/// solver problems (numerical breakdown, unsupported solver/data pairings).
#[derive(Debug, Error)]
pub enum FetrError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("empty data: {0}")]
    EmptyData(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("non-finite value encountered in {0}")]
    Numeric(String),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("capacity exceeded: {0}")]
    Capacity(String),
    #[error("unsupported data shape: {0}")]
    UnsupportedShape(String),
    #[error("singular system: {0}")]
    Singular(String),
    #[error("iteration diverged: {0}")]
    Divergence(String),
    #[error("internal consistency check failed: {0}")]
    Internal(String),
    #[error("degenerate metric: {0}")]
    DegenerateMetric(String),
    #[error("cannot split data: {0}")]
    Split(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid manifest: {message}")]
    Manifest { path: PathBuf, message: String },
}

impl FetrError {
    /// True for errors caused by the input data rather than by a solver.
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            FetrError::Dimension(_)
                | FetrError::EmptyData(_)
                | FetrError::Split(_)
                | FetrError::Parse { .. }
                | FetrError::Io { .. }
                | FetrError::Manifest { .. }
                | FetrError::DegenerateMetric(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FetrError::Io {
            path: path.into(),
            source,
        }
    }
}
