use std::path::PathBuf;

/// Errors produced by model construction, rendering, and training.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input value violated a documented precondition (non-finite number,
    /// weight sum off by more than the tolerance, bad dimension, ...).
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    /// A Gaussian's scales are too small for its covariance to be inverted.
    #[error("degenerate gaussian: {0}")]
    DegenerateGaussian(String),

    /// Parent indices do not form a tree rooted at joint 0.
    #[error("invalid skeleton: {0}")]
    InvalidSkeleton(String),

    /// Mutually inconsistent configuration, e.g. UV-atlas shading requested
    /// on a model without UV coordinates.
    #[error("configuration error: {0}")]
    Config(String),

    /// File or schema problem while reading a dataset, template, or checkpoint.
    #[error("data error{}: {msg}", path_suffix(.path))]
    Data {
        msg: String,
        path: Option<PathBuf>,
    },

    /// A value that must stay finite became NaN or infinite during training.
    #[error("numeric failure: {0}")]
    Numeric(String),
}

fn path_suffix(path: &Option<PathBuf>) -> String {
    match path {
        Some(p) => format!(" ({})", p.display()),
        None => String::new(),
    }
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data {
            msg: msg.into(),
            path: None,
        }
    }

    pub fn data_at(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Data {
            msg: msg.into(),
            path: Some(path.into()),
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::data(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::data(format!("malformed JSON: {e}"))
    }
}

pub type Result<T> = std::result::Result<T, Error>;
