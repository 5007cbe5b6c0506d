use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller-supplied argument or config field is out of range.
    #[error("invalid `{field}`: {reason}")]
    Invalid { field: String, reason: String },

    /// Input population is constant or too small to model.
    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// NaN inputs, integer accumulator overflow and similar arithmetic failures.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Process exit status for the command-line front end: 2 validation, 3 I/O, 4 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Invalid { .. } | Error::Shape(_) => 2,
            Error::Io(_) | Error::Format(_) => 3,
            Error::Degenerate(_) | Error::Numeric(_) => 4,
        }
    }
}
