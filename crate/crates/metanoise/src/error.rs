use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// A documented precondition of an operation was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A loss or gradient became non-finite during optimization.
    #[error("numeric failure at {context}: {detail}")]
    Numeric { context: String, detail: String },

    /// Configuration file problems, with the offending key when known.
    #[error("config error ({key}): {message}")]
    Config { key: String, message: String },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// Malformed checkpoint or gradient file.
    #[error("bad file format ({path}): {detail}")]
    Format { path: String, detail: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn numeric(context: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            context: context.into(),
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
