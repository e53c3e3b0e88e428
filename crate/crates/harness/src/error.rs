use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    /// Invalid or unreadable configuration; the message names the offending field.
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] isarlab_core::Error),
    #[error("i/o error on {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("report error: {0}")]
    Report(String),
    /// A run failed after starting; a checkpoint was written.
    #[error("run failed ({checkpoint}): {source}")]
    Run { checkpoint: String, source: Box<HarnessError> },
}

impl HarnessError {
    pub fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        HarnessError::Io { path: path.display().to_string(), source }
    }

    /// Process exit code: 2 for configuration problems, 3 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Core(isarlab_core::Error::Config(_)) => 2,
            HarnessError::Run { source, .. } if matches!(**source, HarnessError::Config(_)) => 2,
            _ => 3,
        }
    }
}

pub type Result<T, E = HarnessError> = std::result::Result<T, E>;
