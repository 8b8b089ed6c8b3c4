use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("plane normal is not unit length (norm = {0})")]
    NonUnitNormal(f64),

    #[error("homography is singular or otherwise not decomposable")]
    DegenerateHomography,

    #[error("point maps to infinity (denominator {0:e})")]
    PointAtInfinity(f64),

    #[error("timestamp {t} ns outside gyro trace span [{first}, {last}]")]
    OutOfRange { t: i64, first: i64, last: i64 },

    #[error("rotation integration produced a non-finite result")]
    NonFiniteResult,

    #[error("too few features: found {found}, need at least {needed}")]
    TooFewFeatures { found: usize, needed: usize },

    #[error("degenerate point configuration: {0}")]
    DegenerateConfiguration(&'static str),

    #[error("covariance is not positive semidefinite")]
    CovarianceNotPsd,

    #[error("dimension mismatch: expected {expected:?}, got {got:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },

    #[error("warped frame leaves the scene (corner at {x:.1}, {y:.1})")]
    ExcursionTooLarge { x: f64, y: f64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{}:{line}: {message}", path.display())]
    InputFormat {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub(crate) fn input(path: impl Into<PathBuf>, line: usize, message: impl Into<String>) -> Self {
        Error::InputFormat {
            path: path.into(),
            line,
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for malformed or unreadable input, as opposed to numerical failures.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            Error::InputFormat { .. }
                | Error::Io { .. }
                | Error::Image { .. }
                | Error::InvalidArgument(_)
                | Error::OutOfRange { .. }
        )
    }
}
