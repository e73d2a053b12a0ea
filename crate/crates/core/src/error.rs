use thiserror::Error;

/// Error type shared by every module in the crate.
#[derive(Debug, Error)]
pub enum Error {
    /// Two tensor shapes that must agree do not.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    DimMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// A numeric precondition failed (NaN input, non-finite value, ...).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// An API contract was violated by the caller (programming error).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Invalid input data (audio too short, bad factor, missing file, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A text format could not be parsed; `line` is 1-based.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// Parsed data violates a structural constraint.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration value is out of range or unknown.
    #[error("config error: {0}")]
    Config(String),

    /// A checkpoint file is malformed or inconsistent.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code for the CLI: 1 for input-style errors, 2 for
    /// numeric/contract failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) | Error::Contract(_) => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
