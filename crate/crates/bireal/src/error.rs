//! Crate-wide error type. One enum, no boxing: every failure a caller can
//! act on gets its own variant, and the CLI maps categories to exit codes.

use std::fmt;

#[derive(Debug)]
pub enum Error {
    /// A tensor or geometry axis disagrees with what an operation requires.
    ShapeMismatch {
        context: &'static str,
        axis: &'static str,
        expected: usize,
        got: usize,
    },
    /// A network description is internally inconsistent.
    InvalidSpec(String),
    /// A run configuration is unusable (bad epochs, empty schedule, ...).
    InvalidConfig(String),
    Io(std::io::Error),
    /// A file does not parse as the format its magic or extension promised.
    Format(String),
    /// Stored checksum and recomputed checksum disagree.
    ChecksumMismatch { stored: u32, computed: u32 },
    /// Training produced a non-finite loss and was aborted.
    Diverged { epoch: usize, loss: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::ShapeMismatch { context, axis, expected, got } => {
                write!(f, "{context}: axis `{axis}` expected {expected}, got {got}")
            }
            Error::InvalidSpec(msg) => write!(f, "invalid network spec: {msg}"),
            Error::InvalidConfig(msg) => write!(f, "invalid configuration: {msg}"),
            Error::Io(e) => write!(f, "i/o error: {e}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::ChecksumMismatch { stored, computed } => {
                write!(f, "checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")
            }
            Error::Diverged { epoch, loss } => {
                write!(f, "training diverged at epoch {epoch} (loss = {loss})")
            }
        }
    }
}

impl std::error::Error for Error {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            Error::Io(e) => Some(e),
            _ => None,
        }
    }
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e)
    }
}

impl Error {
    /// Process exit code for the CLI. 2 is reserved for argument errors
    /// (clap's convention), which never reach this function.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Io(_) => 3,
            Error::Format(_) | Error::ChecksumMismatch { .. } => 5,
            Error::InvalidSpec(_) | Error::InvalidConfig(_) => 2,
            Error::ShapeMismatch { .. } | Error::Diverged { .. } => 4,
        }
    }
}
