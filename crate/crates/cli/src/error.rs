use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    /// Bad flags, config or missing input paths; exit code 2.
    #[error("{0}")]
    Usage(String),
    /// An upstream artifact changed after the stage that produced it ran.
    #[error("stale artifact {file}: {reason} (rerun `{stage}` or pass --force)")]
    Stale { stage: String, file: String, reason: String },
    #[error(transparent)]
    Runtime(#[from] anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }

    pub fn missing(what: &str, path: &Path) -> Self {
        CliError::Usage(format!("{what} file not found: {}", path.display()))
    }
}

pub type CliResult<T> = Result<T, CliError>;
