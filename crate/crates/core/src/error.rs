use alloc::string::String;

/// Errors raised by the numeric core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("dimension error in {operand}: {detail}")]
    Dimension { operand: &'static str, detail: String },
    #[error("condition error: id {id} is not in 0..{count}")]
    Condition { id: usize, count: usize },
    #[error("unknown source name {0:?} (expected vocals, drums, bass or other)")]
    UnknownSource(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn dim_err(operand: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        operand,
        detail: detail.into(),
    }
}
