use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("inconsistent dimensions: {0}")]
    InconsistentDimensions(String),

    #[error("bad magic: expected \"FTRJ\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported FTRJ version {0}")]
    BadVersion(u32),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("non-finite value at sample {sample}, layer {layer}, dim {dim}")]
    NonFinite {
        sample: usize,
        layer: usize,
        dim: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("too few samples: {0}")]
    TooFewSamples(String),

    #[error("covariance factorization failed after jitter escalation (last jitter {jitter:e})")]
    Factorization { jitter: f64 },

    #[error("degenerate calibration set: {0}")]
    DegenerateCalibration(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Stable machine-readable code, printed by the CLI on failure.
    pub fn code(&self) -> &'static str {
        match self {
            Error::InconsistentDimensions(_) => "E_DIMS",
            Error::BadMagic(_) => "E_MAGIC",
            Error::BadVersion(_) => "E_VERSION",
            Error::Truncated { .. } => "E_TRUNCATED",
            Error::NonFinite { .. } => "E_NONFINITE",
            Error::InvalidArgument(_) => "E_ARG",
            Error::TooFewSamples(_) => "E_SAMPLES",
            Error::Factorization { .. } => "E_FACTOR",
            Error::DegenerateCalibration(_) => "E_DEGENERATE",
            Error::Io { .. } => "E_IO",
            Error::Json(_) => "E_JSON",
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $err:expr) => {
        if !$cond {
            return Err($err);
        }
    };
}
pub(crate) use ensure;
