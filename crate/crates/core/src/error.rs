use thiserror::Error;

/// Errors raised while validating inputs or fitting a single marker.
///
/// Per-marker failures (degenerate fits, singular covariances) are not fatal
/// in a scan: the pipeline records them as skips with the error's message.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("empty group: no {0} samples")]
    EmptyGroup(&'static str),

    #[error("beta value {value} at marker {marker}, sample {sample} lies outside (0, 1)")]
    BetaOutOfRange {
        marker: String,
        sample: usize,
        value: f64,
    },

    #[error("value {0} outside the open interval (0, 1)")]
    Domain(f64),

    #[error("duplicate marker id `{0}`")]
    DuplicateMarker(String),

    #[error("covariate row {row} has a missing value at sample {sample}")]
    MissingCovariate { row: usize, sample: usize },

    #[error("singular design: column `{0}` is collinear with earlier columns")]
    SingularDesign(String),

    #[error("degenerate data: {0}")]
    Degenerate(String),

    #[error("estimated density at the median is {0:e}, below 1e-12")]
    DensityDegenerate(f64),

    #[error("covariance matrix is singular or not positive definite")]
    SingularCovariance,

    #[error("missing value in marker data")]
    MissingValue,

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    #[error("sample reconciliation failed: {0}")]
    Reconcile(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl Error {
    /// True for errors that describe bad user input (exit code 2 in the CLI)
    /// as opposed to unreadable files (exit code 3).
    pub fn is_validation(&self) -> bool {
        !matches!(self, Error::Parse { .. } | Error::Reconcile(_) | Error::Io(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
