use std::io;

/// Errors produced anywhere in the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A coordinate component does not fit the 21-bit biased key encoding.
    #[error("{axis} component {value} is outside [-{limit}, {limit}]", limit = crate::geometry::COORD_LIMIT)]
    CoordinateRange { axis: char, value: i64 },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Internal tables disagree with each other (e.g. plan sizes vs. kernel map).
    #[error("invariant violated: {0}")]
    Invariant(String),

    #[error("plan has no real rows; padding overhead is undefined")]
    EmptyPlan,

    #[error("trace is empty; hit ratio is undefined")]
    EmptyTrace,

    #[error("network config line {line}: {message}")]
    Config { line: usize, message: String },

    #[error("malformed trace file: {0}")]
    TraceFormat(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
