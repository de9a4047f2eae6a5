use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes, channel counts or configuration values that cannot work together.
    #[error("configuration error: {0}")]
    Config(String),

    /// The caller asked for something the API does not allow.
    #[error("usage error: {0}")]
    Usage(String),

    /// NaN or infinity showed up where a finite value was required.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed image or dataset file.
    #[error("format error at byte {offset}: {message}")]
    Format { offset: usize, message: String },

    /// Malformed or incompatible model checkpoint.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn format(offset: usize, msg: impl Into<String>) -> Self {
        Error::Format { offset, message: msg.into() }
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    /// Prefixes the message of numerical and configuration errors with the
    /// location they occurred at.
    pub fn at(self, location: &str) -> Self {
        match self {
            Error::Numerical(m) => Error::Numerical(format!("{location}: {m}")),
            Error::Config(m) => Error::Config(format!("{location}: {m}")),
            other => other,
        }
    }
}
