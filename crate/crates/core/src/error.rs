use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = FcmError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum FcmError {
    #[error("degenerate domain: {0}")]
    DegenerateDomain(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("index {index} out of range for {len} observations")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The Gram system failed the pivot test; the design may not identify
    /// the coefficients.
    #[error("near-singular Gram system: min eigenvalue {min_eig:e}, max eigenvalue {max_eig:e}")]
    NearSingular { min_eig: f64, max_eig: f64 },

    /// The lagged data matrix of a recurrence fit has lower rank than the
    /// requested order: the samples satisfy a shorter recurrence.
    #[error("recurrence of order {order} is rank deficient (rank {rank})")]
    RankDeficient { order: usize, rank: usize },

    #[error("{path}:{line}: {message}")]
    Csv {
        path: String,
        line: u64,
        message: String,
    },

    #[error("{path}: {message}")]
    Manifest { path: String, message: String },

    #[error("i/o error on {path:?}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl FcmError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FcmError::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag, used in JSON error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            FcmError::DegenerateDomain(_) => "degenerate_domain",
            FcmError::GridMismatch(_) => "grid_mismatch",
            FcmError::Domain(_) => "domain",
            FcmError::Shape(_) => "shape",
            FcmError::IndexOutOfRange { .. } => "index_out_of_range",
            FcmError::InvalidArgument(_) => "invalid_argument",
            FcmError::NearSingular { .. } => "near_singular",
            FcmError::RankDeficient { .. } => "rank_deficient",
            FcmError::Csv { .. } => "csv",
            FcmError::Manifest { .. } => "manifest",
            FcmError::Io { .. } => "io",
        }
    }
}
