use thiserror::Error;

/// Errors surfaced by the library.
#[derive(Error, Debug)]
pub enum CoreError {
    #[error("invalid {field}: {reason}")]
    InvalidField { field: String, reason: String },

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("stimulus error: {0}")]
    Stimulus(String),

    #[error("window exits image bounds at frame {frame}: {detail}")]
    WindowOutOfBounds { frame: usize, detail: String },

    #[error("all neurons removed by activity selection; lower the threshold (current {threshold:e})")]
    AllNeuronsRemoved { threshold: f64 },

    #[error("neuron {id} position ({x_um}, {y_um}) um lies outside the electrode lattice")]
    PositionOutOfLattice { id: u64, x_um: f64, y_um: f64 },

    #[error("column {index} has zero variance; it should have been removed by activity selection")]
    ZeroVarianceColumn { index: usize },

    #[error("rate matrix is already standardized")]
    AlreadyStandardized,

    #[error("rate matrix must be standardized before this operation")]
    NotStandardized,

    #[error("sample time {time_s} s is beyond stimulus duration {duration_s} s")]
    SampleBeyondStimulus { time_s: f64, duration_s: f64 },

    #[error("matrix factorization failed; smallest eigenvalue estimate {min_eig:e}")]
    FactorizationFailed { min_eig: f64 },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("NaN in gradient of {tensor} at epoch {epoch}, batch {batch}")]
    GradientNaN { tensor: String, epoch: u64, batch: usize },

    #[error("insufficient occupancy for trigger {trigger}: {count} < min_count {min_count}")]
    InsufficientOccupancy { trigger: String, count: usize, min_count: usize },

    #[error("state key {0} was never observed")]
    UnknownState(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: String, reason: String },
}

impl CoreError {
    pub fn invalid(field: &str, reason: impl Into<String>) -> Self {
        CoreError::InvalidField { field: field.to_string(), reason: reason.into() }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
