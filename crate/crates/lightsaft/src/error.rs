use std::path::PathBuf;

/// Exit code for usage and configuration errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for failed runtime checks and aborted runs.
pub const EXIT_RUNTIME: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] lightsaft_core::Error),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    /// Malformed or unsupported WAV data; `chunk` is the offending chunk id.
    #[error("wav format error in chunk {chunk:?}: {detail}")]
    Wav { chunk: String, detail: String },
    /// Unreadable checkpoint; `entry` names the first bad header field or tensor.
    #[error("checkpoint error at {entry}: {detail}")]
    Checkpoint { entry: String, detail: String },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("usage error: {0}")]
    Usage(String),
    #[error("training diverged at step {step}; last good checkpoint {last_good}")]
    Diverged { step: u64, last_good: PathBuf },
    #[error("check failed: {0}")]
    CheckFailed(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn wav(chunk: &str, detail: impl Into<String>) -> Self {
        Error::Wav { chunk: chunk.into(), detail: detail.into() }
    }

    pub fn checkpoint(entry: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Checkpoint { entry: entry.into(), detail: detail.into() }
    }

    /// Process exit code: 2 for usage/config problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        use lightsaft_core::Error as C;
        match self {
            Error::Core(C::Config(_) | C::UnknownSource(_) | C::Condition { .. }) => EXIT_USAGE,
            Error::Io { .. } | Error::Json { .. } | Error::Usage(_) | Error::Wav { .. } | Error::Checkpoint { .. } => EXIT_USAGE,
            Error::Core(_) | Error::Diverged { .. } | Error::CheckFailed(_) => EXIT_RUNTIME,
        }
    }
}
