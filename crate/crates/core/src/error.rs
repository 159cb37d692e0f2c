use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A configuration or argument value is invalid. `key` names the offending field.
    #[error("invalid `{key}`: {message}")]
    Invalid { key: String, message: String },

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("unknown {kind} `{name}`; registered: {registered}")]
    Unknown {
        kind: &'static str,
        name: String,
        registered: String,
    },

    #[error("{0}")]
    Data(String),

    #[error("{path}: {message}")]
    File { path: PathBuf, message: String },

    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn invalid(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Invalid {
            key: key.into(),
            message: message.into(),
        }
    }

    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn file(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::File {
            path: path.into(),
            message: message.to_string(),
        }
    }

    /// True for errors caused by user input (configs, arguments, registry names)
    /// rather than by a failure while executing.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::Unknown { .. } | Error::Json(_)
        )
    }

    /// Config key associated with the error, when there is one.
    pub fn key(&self) -> Option<&str> {
        match self {
            Error::Invalid { key, .. } => Some(key),
            Error::Unknown { kind, .. } => Some(kind),
            _ => None,
        }
    }

    /// Prefixes the key of a validation error, e.g. `lr` becomes `hparams.lr`.
    pub fn within(self, prefix: &str) -> Self {
        match self {
            Error::Invalid { key, message } => Error::Invalid {
                key: format!("{prefix}.{key}"),
                message,
            },
            other => other,
        }
    }
}
