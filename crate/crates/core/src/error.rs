//! Error type shared by every module.
//!
//! Each variant maps to one failure category. The CLI prints the category
//! as a prefix (`dimension: ...`, `config: ...`) and exits nonzero.

use std::fmt;
use std::io;

#[derive(Debug)]
pub enum Error {
    /// Shapes or extents that do not line up.
    Dimension(String),
    /// A NaN or infinity appeared where a finite value is required.
    Numeric(String),
    /// A caller violated an operation's precondition.
    Contract(String),
    /// Invalid configuration. Holds every violation found.
    Config(Vec<String>),
    /// Malformed input text. `line` is 1-based.
    Parse {
        line: usize,
        message: String,
    },
    /// Data inconsistent with its companion files or the request.
    Data(String),
    /// An object was used before it reached the required state.
    State(String),
    Io(io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    /// Short category name used as the CLI prefix.
    pub fn category(&self) -> &'static str {
        match self {
            Error::Dimension(_) => "dimension",
            Error::Numeric(_) => "numeric",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Parse { .. } => "parse",
            Error::Data(_) => "data",
            Error::State(_) => "state",
            Error::Io(_) => "io",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension(m) | Error::Numeric(m) | Error::Contract(m) | Error::Data(m) | Error::State(m) => {
                write!(f, "{}: {}", self.category(), m)
            }
            Error::Config(list) => write!(f, "config: {}", list.join("; ")),
            Error::Parse { line, message } => write!(f, "parse: line {line}: {message}"),
            Error::Io(e) => write!(f, "io: {e}"),
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

impl From<io::Error> for Error {
    fn from(e: io::Error) -> Self {
        Error::Io(e)
    }
}
