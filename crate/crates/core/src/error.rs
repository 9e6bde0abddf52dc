use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("zero-length exposure: t_begin == t_end ({0}) with a nonempty event stream")]
    ZeroLengthExposure(f64),

    #[error("empty interval [{a}, {b})")]
    EmptyInterval { a: f64, b: f64 },

    #[error("intervals overlap or are not contiguous: [{0}, {1}) followed by [{2}, {3})")]
    OverlappingIntervals(f64, f64, f64, f64),

    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("length mismatch for {what}: expected {expected}, found {found}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParameter { name: &'static str, reason: String },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("unknown fixture pattern `{0}`")]
    UnknownPattern(String),

    #[error("image too small: {width}x{height}, need at least {min}x{min}")]
    ImageTooSmall {
        width: usize,
        height: usize,
        min: usize,
    },

    #[error("empty candidate grid")]
    EmptyGrid,

    #[error("degenerate blur denominator {value} at pixel ({x}, {y})")]
    DegenerateDenominator { x: usize, y: usize, value: f64 },

    #[error("interval [{a}, {b}) is not covered by the event volume")]
    IntervalNotInVolume { a: f64, b: f64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("bad format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn param(name: &'static str, reason: impl Into<String>) -> Self {
        Error::InvalidParameter {
            name,
            reason: reason.into(),
        }
    }

    pub(crate) fn parse(line: usize, message: impl Into<String>) -> Self {
        Error::Parse {
            line,
            message: message.into(),
        }
    }
}
