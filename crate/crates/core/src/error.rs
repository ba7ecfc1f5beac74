use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Malformed container: bad magic, unparsable header, truncated payload.
    #[error("format error: {0}")]
    Format(String),

    /// Wrong dtype, rank, or mismatched dimensions between inputs.
    #[error("shape error: {0}")]
    Shape(String),

    /// Well-formed input that violates a domain invariant.
    #[error("validation error: {0}")]
    Validation(String),

    #[error("i/o error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error on {path}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    /// The edge-aware solver hit its iteration cap before reaching tolerance.
    #[error(
        "solver did not converge: relative residual {residual:e} after {iterations} iterations"
    )]
    NonConvergence { iterations: usize, residual: f64 },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Attaches a file path to format/shape/validation messages raised while
    /// decoding that file.
    pub(crate) fn at_path(self, path: &std::path::Path) -> Self {
        match self {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            Error::Shape(m) => Error::Shape(format!("{}: {m}", path.display())),
            Error::Validation(m) => Error::Validation(format!("{}: {m}", path.display())),
            other => other,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
