use alloc::string::String;
use core::fmt;

/// Errors raised by the segmentation engine.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// Tensor extents do not line up for the requested operation.
    Dimension { op: &'static str, detail: String },
    /// An argument is outside the domain of the operation.
    Argument(String),
    /// A configuration value is invalid or inconsistent.
    Config(String),
    /// A routing plan does not fit the stage-2 window grid.
    Routing(String),
    /// Memory frames were pushed out of temporal order.
    Ordering { last: usize, got: usize },
    /// Memory bank and saliency pattern queue disagree on frame indices.
    Alignment(String),
    /// The streaming protocol was violated (e.g. no first-frame mask).
    Protocol(String),
    /// A requested record entry is missing.
    Lookup(String),
    /// A named weight tensor is missing or has the wrong shape.
    Weights(String),
    /// A computation produced NaN or infinity.
    NonFinite(String),
}

impl Error {
    pub(crate) fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dimension {
            op,
            detail: detail.into(),
        }
    }

    /// Short, stable name of the error class (used for CLI exit messages).
    pub fn class(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension error",
            Error::Argument(_) => "argument error",
            Error::Config(_) => "config error",
            Error::Routing(_) => "routing error",
            Error::Ordering { .. } => "ordering error",
            Error::Alignment(_) => "alignment error",
            Error::Protocol(_) => "protocol error",
            Error::Lookup(_) => "lookup error",
            Error::Weights(_) => "weights error",
            Error::NonFinite(_) => "non-finite error",
        }
    }
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::Dimension { op, detail } => write!(f, "dimension error in {op}: {detail}"),
            Error::Ordering { last, got } => write!(
                f,
                "ordering error: frame {got} pushed after frame {last}"
            ),
            Error::Argument(m)
            | Error::Config(m)
            | Error::Routing(m)
            | Error::Alignment(m)
            | Error::Protocol(m)
            | Error::Lookup(m)
            | Error::Weights(m)
            | Error::NonFinite(m) => write!(f, "{}: {m}", self.class()),
        }
    }
}

impl core::error::Error for Error {}

pub type Result<T> = core::result::Result<T, Error>;
