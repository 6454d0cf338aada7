use std::path::PathBuf;

use thiserror::Error;

use crate::geo::Frame;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("expected a pose in {expected:?}, found {found:?}")]
    FrameMismatch { expected: Frame, found: Frame },

    #[error("invalid similarity transform: {0}")]
    InvalidTransform(String),

    #[error("invalid trail: {0}")]
    InvalidTrail(String),

    #[error("unknown scenario `{0}` (expected straight100, zigzag250 or long1k)")]
    UnknownScenario(String),

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("need at least {needed} pose pairs, have {have}")]
    InsufficientData { needed: usize, have: usize },

    #[error("degenerate geometry: singular value ratio {ratio:e} below {threshold:e}")]
    DegenerateGeometry { ratio: f64, threshold: f64 },

    #[error("loss is not finite")]
    NonFiniteLoss,

    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        /// Model parameters from the last epoch with a finite loss.
        last_finite: Box<crate::perception::TwoHeadModel>,
    },

    #[error("feature dimension mismatch: model expects {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, reason: impl Into<String>) -> Self {
        Error::Parse {
            line,
            reason: reason.into(),
        }
    }
}
