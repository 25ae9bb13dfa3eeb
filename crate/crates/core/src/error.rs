use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Operand shapes are incompatible, or a size is out of range.
    #[error("shape error: {0}")]
    Shape(String),
    /// A parameter lies outside its mathematical domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// NaN or infinity appeared where finite values are required.
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: u64, msg: String },
    /// An API was called with state it does not accept (e.g. a stale tape).
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
pub(crate) use domain_err;
pub(crate) use shape_err;
