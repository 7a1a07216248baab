use std::path::PathBuf;

/// Errors produced by the segmentation pipeline.
///
/// `ShapeMismatch`, `InvalidParam`, `InvalidConfig` and `Contract` are
/// validation failures (CLI exit code 2); the rest are runtime failures
/// (exit code 3).
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("mask has no boundary pixel (all background or all foreground)")]
    EmptyBoundary,

    #[error("degenerate weight map: max A equals min A")]
    DegenerateMap,

    #[error("mask is empty, nothing to crop")]
    EmptyMask,

    #[error("problem size {size} exceeds the pixel cap {cap}")]
    SizeCap { size: usize, cap: usize },

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("feature cache mismatch: {0}")]
    CacheMismatch(String),

    #[error("bad file format in {path}: {reason}")]
    BadFormat { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn bad_format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::BadFormat {
            path: path.into(),
            reason: reason.into(),
        }
    }

    pub fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by invalid user input rather than runtime failure.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::ShapeMismatch(_)
                | Error::InvalidParam(_)
                | Error::InvalidConfig(_)
                | Error::Contract(_)
                | Error::EmptyBoundary
                | Error::DegenerateMap
                | Error::EmptyMask
                | Error::SizeCap { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
