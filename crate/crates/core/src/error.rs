use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("image dimensions do not match: {0}")]
    DimensionMismatch(String),

    #[error("position ({x}, {y}) lies outside the warp grid coverage")]
    OutsideGrid { x: f64, y: f64 },

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("non-finite Jacobian entry at residual {residual}, unknown {unknown}")]
    NonFiniteJacobian { residual: usize, unknown: usize },

    #[error("non-finite residual {residual} on level {level}")]
    NonFiniteResidual { level: usize, residual: usize },

    #[error("PCG diverged: preconditioned residual grew from {initial:e} to {current:e} at iteration {iteration}")]
    PcgDiverged {
        iteration: usize,
        initial: f64,
        current: f64,
    },

    #[error("system matrix is not positive definite (p^T A p = {curvature:e} at iteration {iteration})")]
    NotPositiveDefinite { iteration: usize, curvature: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors raised by the numerical solver rather than by bad input.
    pub fn is_solver_failure(&self) -> bool {
        matches!(
            self,
            Error::NonFiniteJacobian { .. }
                | Error::NonFiniteResidual { .. }
                | Error::PcgDiverged { .. }
                | Error::NotPositiveDefinite { .. }
        )
    }
}
