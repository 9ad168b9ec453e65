use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// The requested truncation leaves more probability outside the grid
    /// than the configured tolerance allows.
    #[error("truncation overflow: tail mass {tail_mass:e} exceeds tolerance {tolerance:e} at dim {dim}")]
    TruncationOverflow {
        tail_mass: f64,
        tolerance: f64,
        dim: usize,
    },

    /// A moment is dominated by the edge of a truncated support.
    #[error("moment of order {order} unreliable: edge of support contributes {relative:e} of its value")]
    TruncationUnreliable { order: usize, relative: f64 },

    #[error("statistic undefined for zero mean photon number")]
    ZeroMean,

    #[error("herald outcome {outcome} in the {arm} arm has zero probability")]
    EmptyHerald { arm: &'static str, outcome: usize },

    #[error("effective mode number undefined for g2 = {g2} <= 1")]
    UndefinedModeNumber { g2: f64 },

    #[error("ill-conditioned problem: {0}")]
    IllConditioned(String),

    #[error("Monte-Carlo unreliable: {failures} of {trials} resamples failed")]
    UnreliableMonteCarlo { failures: usize, trials: usize },

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("calibration failure: {0}")]
    CalibrationFailure(String),

    /// No template claims the trace; carries the estimate of the template
    /// whose reliability window is closest.
    #[error("photon number {nearest_estimate} outside every template window")]
    OutOfRange { nearest_estimate: f64 },

    #[error("format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParameter(_) => "invalid-parameter",
            Error::TruncationOverflow { .. } => "truncation-overflow",
            Error::TruncationUnreliable { .. } => "truncation-unreliable",
            Error::ZeroMean => "zero-mean",
            Error::EmptyHerald { .. } => "empty-herald",
            Error::UndefinedModeNumber { .. } => "undefined-mode-number",
            Error::IllConditioned(_) => "ill-conditioned",
            Error::UnreliableMonteCarlo { .. } => "unreliable-monte-carlo",
            Error::InvalidData(_) => "invalid-data",
            Error::DimensionMismatch(_) => "dimension-mismatch",
            Error::CalibrationFailure(_) => "calibration-failure",
            Error::OutOfRange { .. } => "out-of-range",
            Error::Format(_) => "format",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidParameter(msg.into())
    }
}
