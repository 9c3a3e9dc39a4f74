use alloc::string::String;
use core::fmt;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Operand shapes do not conform.
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    /// A matrix was built from data of the wrong length or with a zero extent.
    Construction { rows: usize, cols: usize, len: usize },
    /// A value that must be finite was NaN or infinite.
    NonFinite(&'static str),
    /// A caller broke an operation's contract.
    Contract(String),
    /// An algebraic identity that must hold did not.
    Identity {
        name: &'static str,
        lhs: f64,
        rhs: f64,
    },
}

pub type Result<T> = core::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::Shape { op, lhs, rhs }
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, lhs, rhs } => write!(
                f,
                "dimension mismatch in {op}: {}x{} vs {}x{}",
                lhs.0, lhs.1, rhs.0, rhs.1
            ),
            Error::Construction { rows, cols, len } => write!(
                f,
                "cannot build a {rows}x{cols} matrix from {len} values"
            ),
            Error::NonFinite(what) => write!(f, "non-finite value in {what}"),
            Error::Contract(msg) => write!(f, "contract violated: {msg}"),
            Error::Identity { name, lhs, rhs } => {
                write!(f, "identity `{name}` failed: {lhs:e} != {rhs:e}")
            }
        }
    }
}

impl core::error::Error for Error {}
