use alloc::string::String;
use core::fmt;

pub type Result<T> = core::result::Result<T, Error>;

/// Failure modes shared by every module of the core crate.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Two operands (or an operand and a config) disagree on shape.
    Shape { op: &'static str, detail: String },
    /// A non-finite value was found at the given flat element index.
    NonFinite { op: &'static str, index: usize },
    /// Empty grid or empty pixel set where at least one element is required.
    Empty { op: &'static str },
    /// A ground-truth or predicted label outside `[0, num_classes)`.
    InvalidLabel { op: &'static str, pixel: usize, label: u8, num_classes: usize },
    /// A probability row whose sum is not 1 within tolerance.
    NotNormalized { op: &'static str, pixel: usize, sum: f64 },
    /// A valid depth that is not strictly positive.
    InvalidDepth { op: &'static str, pixel: usize, value: f64 },
    /// Inconsistent or out-of-range configuration.
    Config(String),
    /// Backward pass requested without the cached forward state.
    MissingCache { op: &'static str },
    /// Training stage requested out of order.
    StageOrder { requested: u8, completed: u8 },
    /// A loss turned NaN or infinite during training.
    NonFiniteLoss { iteration: u64 },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Shape { op, detail } => write!(f, "{op}: shape mismatch: {detail}"),
            Error::NonFinite { op, index } => {
                write!(f, "{op}: non-finite value at element {index}")
            }
            Error::Empty { op } => write!(f, "{op}: empty input"),
            Error::InvalidLabel { op, pixel, label, num_classes } => write!(
                f,
                "{op}: label {label} at pixel {pixel} is out of range for {num_classes} classes"
            ),
            Error::NotNormalized { op, pixel, sum } => {
                write!(f, "{op}: probabilities at pixel {pixel} sum to {sum}")
            }
            Error::InvalidDepth { op, pixel, value } => {
                write!(f, "{op}: depth {value} at pixel {pixel} must be positive")
            }
            Error::Config(detail) => write!(f, "invalid configuration: {detail}"),
            Error::MissingCache { op } => {
                write!(f, "{op}: no cached forward pass (run forward with caching first)")
            }
            Error::StageOrder { requested, completed } => write!(
                f,
                "stage {requested} cannot run: last completed stage is {completed}"
            ),
            Error::NonFiniteLoss { iteration } => {
                write!(f, "loss became non-finite at iteration {iteration}")
            }
        }
    }
}

impl core::error::Error for Error {}
