use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("length mismatch: expected {expected}, got {actual}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("location ({x:.3}, {y:.3}) unusable: retained {retained} of {total} observations")]
    UnusableLocation { x: f64, y: f64, retained: usize, total: usize },

    #[error("cell ({col}, {row}) has {found} observations, need {needed}")]
    InsufficientObservations { col: usize, row: usize, found: usize, needed: usize },

    #[error("observation at ({x:.3}, {y:.3}) lies outside the grid")]
    OffGrid { x: f64, y: f64 },

    #[error("window size {size} exceeds grid dimension {limit}")]
    WindowTooLarge { size: usize, limit: usize },

    #[error("no recent observations")]
    NoRecentObservations,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("divergence at epoch {epoch}: non-finite loss")]
    Divergence { epoch: usize },

    #[error("non-finite activation in {0}")]
    NonFiniteActivation(&'static str),

    #[error("belief at timestep {t} is almost entirely null")]
    AllNullBelief { t: usize },

    #[error("empty candidate set at timestep {t}")]
    EmptyCandidates { t: usize },

    #[error("all hypotheses rejected")]
    AllRejected,

    #[error("config: {field}: {message}")]
    Config { field: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Short machine-readable tag used by the CLI error line and the C ABI.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidInput(_) => "invalid_input",
            Error::LengthMismatch { .. } => "length_mismatch",
            Error::NonFinite { .. } => "non_finite",
            Error::UnusableLocation { .. } => "unusable_location",
            Error::InsufficientObservations { .. } => "insufficient_observations",
            Error::OffGrid { .. } => "off_grid",
            Error::WindowTooLarge { .. } => "window_too_large",
            Error::NoRecentObservations => "no_recent_observations",
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::Divergence { .. } => "divergence",
            Error::NonFiniteActivation(_) => "non_finite_activation",
            Error::AllNullBelief { .. } => "all_null_belief",
            Error::EmptyCandidates { .. } => "empty_candidates",
            Error::AllRejected => "all_rejected",
            Error::Config { .. } => "config",
            Error::Io { .. } => "io",
            Error::Parse { .. } => "parse",
            Error::Csv(_) => "csv",
            Error::Json(_) => "json",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { field: field.into(), message: message.into() }
    }
}
