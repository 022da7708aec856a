use thiserror::Error;

/// Errors raised anywhere in the workbench library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("degenerate variance: {0}")]
    DegenerateVariance(String),

    #[error("optimizer state error: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("aggregation error: {0}")]
    Aggregation(String),

    #[error("invalid input: {0}")]
    Input(String),

    #[error("cohort too small: {0}")]
    Cohort(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("client {client} failed at epoch {epoch}: {reason}")]
    ClientFailure {
        client: usize,
        epoch: usize,
        reason: String,
    },

    #[error("suite error: {0}")]
    Suite(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("format error in {path}: {reason}")]
    Format { path: String, reason: String },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(path: impl AsRef<std::path::Path>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.as_ref().display().to_string(),
            reason: reason.into(),
        }
    }
}
