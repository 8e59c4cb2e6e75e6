use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch on axis {axis}: {detail}")]
    Shape { axis: &'static str, detail: String },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value at coordinate {index}: {detail}")]
    NonFinite { index: usize, detail: String },

    #[error("binary regularizer saturated: every probability equals 0.5")]
    Saturated,

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("parse error in {path} at {location}: {detail}")]
    Parse {
        path: PathBuf,
        location: String,
        detail: String,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(axis: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            axis,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 config, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Contract(_) => 1,
            Error::Parse { .. }
            | Error::Validation(_)
            | Error::Io { .. }
            | Error::Shape { .. }
            | Error::Degenerate(_) => 2,
            Error::NonFinite { .. } | Error::Saturated | Error::Numeric(_) => 3,
        }
    }
}
