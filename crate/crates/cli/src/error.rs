use std::path::PathBuf;

use thiserror::Error;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] mixssl::Error),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{} already exists; pass --force to overwrite", .0.display())]
    Exists(PathBuf),
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(mixssl::Error::Io(e))
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(mixssl::Error::Json(e))
    }
}

impl CliError {
    /// 0 success, 2 configuration, 3 data, 4 numeric failure, 5 incompatible
    /// or unreadable checkpoint.
    pub fn exit_code(&self) -> i32 {
        use mixssl::Error as E;
        match self {
            CliError::Config(_) | CliError::Exists(_) => 2,
            CliError::Core(e) => match e {
                E::Config(_) | E::Json(_) => 2,
                E::InvalidInput(_)
                | E::DatasetNotFound(_)
                | E::EmptyDataset(_)
                | E::Image(_)
                | E::Io(_)
                | E::UndefinedMetric(_)
                | E::CheckpointNotFound(_) => 3,
                E::NonFiniteLoss { .. } => 4,
                E::IncompatibleCheckpoint(_) | E::CheckpointCorrupt(_) => 5,
            },
        }
    }

    pub fn kind(&self) -> &'static str {
        use mixssl::Error as E;
        match self {
            CliError::Config(_) => "config",
            CliError::Exists(_) => "output-exists",
            CliError::Core(e) => match e {
                E::InvalidInput(_) => "invalid-input",
                E::Config(_) => "config",
                E::DatasetNotFound(_) => "dataset-not-found",
                E::EmptyDataset(_) => "empty-dataset",
                E::CheckpointNotFound(_) => "checkpoint-not-found",
                E::CheckpointCorrupt(_) => "checkpoint-corrupt",
                E::IncompatibleCheckpoint(_) => "incompatible-checkpoint",
                E::NonFiniteLoss { .. } => "non-finite-loss",
                E::UndefinedMetric(_) => "undefined-metric",
                E::Io(_) => "io",
                E::Json(_) => "json",
                E::Image(_) => "image",
            },
        }
    }

    /// One-line JSON for stderr.
    pub fn to_json(&self) -> String {
        serde_json::json!({
            "error": self.kind(),
            "message": self.to_string(),
            "exit_code": self.exit_code(),
        })
        .to_string()
    }
}
