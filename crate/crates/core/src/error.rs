use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A caller broke a documented precondition (dimension mismatch, bad range).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("infeasible constraint: {required} required classes but only {proposals} proposals")]
    Infeasible { required: usize, proposals: usize },

    #[error("enumeration size {count} exceeds cap {cap}")]
    TooLarge { count: u128, cap: u64 },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("config field `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

/// Returns a contract error unless `cond` holds.
macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err($crate::error::contract(format!($($fmt)+)));
        }
    };
}
pub(crate) use ensure;
