use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("matrix is not positive definite (leading minor {minor} fails)")]
    NotPositiveDefinite { minor: usize },

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Wraps a numeric failure with the name of the step that produced it.
    pub fn during(self, step: &str) -> Self {
        match self {
            Error::NotPositiveDefinite { minor } => Error::Numeric(format!(
                "{step}: matrix is not positive definite (leading minor {minor} fails)"
            )),
            Error::Numeric(msg) => Error::Numeric(format!("{step}: {msg}")),
            other => other,
        }
    }

    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NotPositiveDefinite { .. } | Error::Numeric(_))
    }
}
