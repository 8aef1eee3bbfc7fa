use std::fmt;

/// Error type shared across the engine.
#[derive(Debug)]
pub enum Error {
    /// Shape or axis mismatch in a tensor operation.
    Dimension(String),
    /// Non-finite values where finite ones are required.
    Numeric(String),
    /// API contract violation (e.g. backward on a non-scalar loss).
    Contract(String),
    /// Invalid model or run configuration.
    Config(String),
    /// Malformed textual input (CSV manifest, JSON config).
    Parse(String),
    /// Dataset ingestion failure (missing file, bad label cell).
    Ingestion(String),
    /// Malformed binary payload (PGM/PPM, checkpoint).
    Format(String),
    /// Metric is undefined for the given inputs (e.g. single-class AUC).
    UndefinedMetric(String),
    /// Underlying I/O failure.
    Io(std::io::Error),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(msg) => write!(f, "dimension error: {msg}"),
            Error::Numeric(msg) => write!(f, "numeric error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Config(msg) => write!(f, "config error: {msg}"),
            Error::Parse(msg) => write!(f, "parse error: {msg}"),
            Error::Ingestion(msg) => write!(f, "ingestion error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::UndefinedMetric(msg) => write!(f, "undefined metric: {msg}"),
            Error::Io(err) => write!(f, "i/o error: {err}"),
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(err) => Some(err),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err)
    }
}

pub type Result<T> = std::result::Result<T, Error>;
