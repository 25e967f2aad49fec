use std::path::PathBuf;

/// Errors produced anywhere in the crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },

    #[error("invalid input: {0}")]
    Input(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("non-finite value produced by `{0}`")]
    NonFinite(&'static str),

    #[error("training diverged at step {step}: {detail}")]
    Training { step: usize, detail: String },

    #[error("scoring failed: {0}")]
    Scoring(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    Version { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("missing upstream artifact `{}`", .0.display())]
    Dependency(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn dim_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Dimension {
        op,
        detail: detail.into(),
    }
}
