//! Crate-wide error type. Variants map onto the CLI exit-code classes:
//! shape/config/data/io problems are data errors (exit 2), numeric and
//! degenerate-geometry failures are numerical errors (exit 3).

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A tensor or map arrived with extents the operation cannot accept.
    #[error("{op}: {detail}")]
    Shape { op: &'static str, detail: String },

    /// Invalid configuration or argument value.
    #[error("config: {0}")]
    Config(String),

    /// Malformed file contents.
    #[error("{what}: {detail}")]
    Data { what: String, detail: String },

    // Display names only the path; the cause stays on the source chain so
    // wrappers that print the chain do not repeat it.
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// Non-finite values or a numerically unusable result.
    #[error("numeric: {0}")]
    Numeric(String),

    /// Geometry too degenerate to fit (e.g. too few RANSAC samples).
    #[error("degenerate: {0}")]
    Degenerate(String),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn data(what: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Data {
            what: what.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
