use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("singular transform: |det| = {det:e} is below {tolerance:e}")]
    SingularTransform { det: f64, tolerance: f64 },

    #[error("divergent step: {0}")]
    Divergent(String),

    #[error("training aborted after {0} consecutive divergent steps")]
    Aborted(usize),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{kind} fingerprint mismatch: expected {expected}, found {found}")]
    Fingerprint {
        kind: &'static str,
        expected: String,
        found: String,
    },

    #[error("unsupported checkpoint format version {found} (this build reads {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("file not found: {}", .0.display())]
    NotFound(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
