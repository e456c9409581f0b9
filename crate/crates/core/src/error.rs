use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the calibration toolkit.
#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite input")]
    NonFinite,

    #[error("quantized value out of range: {value} not in [-{qmax}, {qmax}]")]
    OutOfRange { value: i64, qmax: i32 },

    #[error("invalid quantization parameters: {0}")]
    InvalidParams(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("no calibration data")]
    NoCalibrationData,

    #[error("percentile {0} outside [0, 0.5]")]
    InvalidPercentile(f64),

    #[error("empty histogram")]
    EmptyHistogram,

    #[error("histogram too coarse for entropy calibration ({bins} bins, need at least {needed})")]
    HistogramTooCoarse { bins: usize, needed: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown layer `{0}`")]
    UnknownLayer(String),

    #[error("evaluation failed: {0}")]
    Evaluation(String),

    #[error("{stage}: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("{path}: bad magic")]
    BadMagic { path: PathBuf },

    #[error("{path}: truncated")]
    Truncated { path: PathBuf },

    #[error("{path}: non-finite payload")]
    NonFinitePayload { path: PathBuf },

    #[error("{path}: trailing bytes after payload")]
    TrailingBytes { path: PathBuf },

    #[error("{path}: unsupported dtype code {code}")]
    UnsupportedDtype { path: PathBuf, code: u8 },

    #[error("line {line}: {msg}")]
    Malformed { line: usize, msg: String },

    #[error("duplicate layer name `{0}`")]
    DuplicateLayer(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_stage(self, stage: &'static str) -> Self {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }

    /// Whether the error stems from user-supplied configuration rather than data.
    pub fn is_config(&self) -> bool {
        match self {
            Error::InvalidParams(_) | Error::InvalidPercentile(_) | Error::Config(_) => true,
            Error::Stage { source, .. } => source.is_config(),
            _ => false,
        }
    }

    pub fn is_invariant(&self) -> bool {
        match self {
            Error::Invariant(_) => true,
            Error::Stage { source, .. } => source.is_invariant(),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
