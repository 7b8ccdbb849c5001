use std::path::PathBuf;

/// Errors produced anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A caller passed arguments that violate an operation's preconditions
    /// (shape mismatch, invalid axis, bad configuration, ...).
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{}: {message}", path.display())]
    Image { path: PathBuf, message: String },

    /// The checkpoint could not be decoded; `field` names the first part of
    /// the file that failed validation.
    #[error("corrupt checkpoint at `{field}`: {message}")]
    CorruptCheckpoint { field: String, message: String },

    /// Training produced a NaN or infinite loss.
    #[error("non-finite loss {value} at epoch {epoch}, batch {batch}")]
    Diverged { epoch: usize, batch: usize, value: f64 },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn corrupt(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::CorruptCheckpoint {
            field: field.into(),
            message: message.into(),
        }
    }
}

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::InvalidInput(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
