use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("no Phase I data")]
    NoPhaseOneData,

    #[error("invalid update: {0}")]
    InvalidUpdate(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("nothing to flip: client holds no samples of class {0}")]
    NothingToFlip(usize),

    #[error("non-finite residual for client {0}")]
    NonFiniteResidual(usize),

    #[error("degenerate training: Phase I update matrix is all zero")]
    DegenerateTraining,

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("calibration failed: {0}")]
    Calibration(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("malformed IDX file: {0}")]
    Idx(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// True for errors caused by the user's input rather than by the computation.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config(_) | Error::Idx(_) | Error::NothingToFlip(_))
    }

    /// True when training or the monitor produced unusable numbers.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::Numerical(_)
                | Error::DegenerateTraining
                | Error::NonFiniteResidual(_)
                | Error::InvalidUpdate(_)
                | Error::Calibration(_)
        )
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
