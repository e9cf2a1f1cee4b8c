use thiserror::Error;

/// Every fallible operation in the crate reports one of these.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("cache error: {0}")]
    Cache(String),
    #[error("length error: {0}")]
    Length(String),
    #[error("budget error: {0}")]
    Budget(String),
    #[error("fit error: {0}")]
    Fit(String),
    #[error("checkpoint format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Numeric failures (non-finite losses, diverging fits) versus everything
    /// else; the CLI maps these to distinct exit codes.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::Numeric(_) | Error::Fit(_))
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
