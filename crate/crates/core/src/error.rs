use thiserror::Error;

/// Errors raised across the engine. Variants follow the failure classes
/// callers branch on (the CLI maps them to exit statuses).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("invalid state: {0}")]
    State(String),
    #[error("validation failed: {0}")]
    Validation(String),
    #[error("metric undefined: {0}")]
    UndefinedMetric(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

macro_rules! ensure {
    ($cond:expr, $variant:ident, $($arg:tt)+) => {
        if !$cond {
            return Err($crate::error::Error::$variant(format!($($arg)+)));
        }
    };
}
pub(crate) use ensure;
