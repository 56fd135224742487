use std::fmt;

/// Error type shared by every module in the crate.
#[derive(Debug)]
pub enum Error {
    /// Tensor shapes are incompatible with the requested operation.
    Shape(String),
    /// A scalar argument is out of its valid range.
    Value(String),
    /// A call violated an operation's contract (e.g. non-scalar loss).
    Contract(String),
    /// An external file does not match its declared format.
    Format(String),
    /// A NaN or infinity surfaced where finite values are required.
    Numerics(String),
    Io(std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Value(msg) => write!(f, "value error: {msg}"),
            Error::Contract(msg) => write!(f, "contract error: {msg}"),
            Error::Format(msg) => write!(f, "format error: {msg}"),
            Error::Numerics(msg) => write!(f, "numerics error: {msg}"),
            Error::Io(err) => write!(f, "io error: {err}"),
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
