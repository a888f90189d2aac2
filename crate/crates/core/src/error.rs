use thiserror::Error;

/// Failure modes surfaced by the toolkit. Dimension/contract/config errors are
/// programming or usage mistakes; `NonFinite` means a forward op produced
/// NaN/Inf from finite inputs (overflow is an error, never a silent value).
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension error in {op}: {detail}")]
    Dim { op: &'static str, detail: String },

    #[error("contract error: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite values after {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn dim(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Dim { op, detail: detail.into() }
    }

    pub fn contract(detail: impl Into<String>) -> Self {
        Error::Contract(detail.into())
    }

    pub fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }
}
