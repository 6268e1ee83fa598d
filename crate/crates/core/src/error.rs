use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// The variants map onto the CLI exit-code families: `Config` → 2,
/// `Parse`/`Io`/`Data` → 3, everything numeric → 4.
#[derive(Debug, Error)]
pub enum FmgpError {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse { row: usize, column: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged at iteration {iteration}: {message}")]
    Training { iteration: usize, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FmgpError {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        FmgpError::Shape(msg.into())
    }

    pub(crate) fn numeric(msg: impl Into<String>) -> Self {
        FmgpError::Numeric(msg.into())
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        FmgpError::Domain(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        FmgpError::Config(msg.into())
    }

    /// Short machine-readable tag for the error family.
    pub fn kind(&self) -> &'static str {
        match self {
            FmgpError::Shape(_) => "shape",
            FmgpError::Numeric(_) => "numeric",
            FmgpError::Domain(_) => "domain",
            FmgpError::Config(_) => "config",
            FmgpError::Parse { .. } => "parse",
            FmgpError::Data(_) => "data",
            FmgpError::Training { .. } => "training",
            FmgpError::Io(_) => "io",
            FmgpError::Json(_) => "json",
        }
    }
}

pub type Result<T> = std::result::Result<T, FmgpError>;
