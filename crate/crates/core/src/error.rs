use std::io;

/// Errors produced by the library.
///
/// Validation errors describe bad arguments or inconsistent shapes; format and
/// I/O errors describe unreadable or malformed files. The CLI maps the first
/// class to exit code 1 and the other two to exit code 2.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    /// True for file-level failures (unreadable, truncated or malformed input).
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Format(_) | Error::Io(_))
    }

    pub fn exit_code(&self) -> i32 {
        if self.is_io() {
            2
        } else {
            1
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::Error::Validation(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
