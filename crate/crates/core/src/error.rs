use alloc::string::String;
use core::fmt;

/// Errors raised by the core library.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// An anchor with non-positive width or height was used for encoding.
    InvalidAnchor,
    /// A ground-truth box with non-positive width or height was encoded.
    DegenerateBox,
    /// Inconsistent or unsupported configuration.
    Config(String),
    /// Tensor shapes do not line up.
    Shape(String),
    /// Epoch outside the schedule range.
    Schedule { epoch: f64, max: f64 },
    /// Not enough samples to compute a statistic.
    Statistics(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::InvalidAnchor => write!(f, "anchor has non-positive area"),
            Error::DegenerateBox => write!(f, "box has non-positive width or height"),
            Error::Config(msg) => write!(f, "configuration error: {msg}"),
            Error::Shape(msg) => write!(f, "shape error: {msg}"),
            Error::Schedule { epoch, max } => {
                write!(f, "epoch {epoch} outside schedule range [0, {max}]")
            }
            Error::Statistics(msg) => write!(f, "statistics error: {msg}"),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
