use std::path::PathBuf;

use thiserror::Error;

use crate::state::PoseId;

#[derive(Debug, Error)]
pub enum Error {
    #[error("IMU timestamps must increase (t0 = {t0}, t1 = {t1})")]
    NonIncreasingTime { t0: f64, t1: f64 },

    #[error("IMU step of {dt} s exceeds the {max} s limit")]
    StepTooLarge { dt: f64, max: f64 },

    #[error("sliding window is full ({0} poses); marginalize before augmenting")]
    WindowFull(usize),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("pose {0} is not in the sliding window")]
    UnknownPose(PoseId),

    #[error("point is behind the camera (depth {0} m)")]
    BehindCamera(f64),

    #[error("feature needs at least {needed} observations, got {got}")]
    TooFewObservations { needed: usize, got: usize },

    #[error("feature Jacobian is rank deficient")]
    DegenerateGeometry,

    #[error("matrix is not invertible")]
    Singular,

    #[error("{0}")]
    InvalidConfig(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}:{line}: {msg}")]
    Parse { path: PathBuf, line: usize, msg: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}
