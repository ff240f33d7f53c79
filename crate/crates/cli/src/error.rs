use std::path::Path;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    /// The configuration is malformed or inconsistent. Nothing was run.
    #[error("{0}")]
    Validation(String),
    #[error(transparent)]
    Core(#[from] seek_gp::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    /// Another run holds the output directory.
    #[error("{0}")]
    Locked(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn validation(message: impl Into<String>) -> Self {
        CliError::Validation(message.into())
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Validation(_) => "validation",
            CliError::Core(seek_gp::Error::Config(_)) => "validation",
            CliError::Core(seek_gp::Error::Ingest { .. }) => "ingest",
            CliError::Core(seek_gp::Error::Numerical(_)) => "numerical",
            CliError::Core(_) => "runtime",
            CliError::Io { .. } => "io",
            CliError::Locked(_) => "locked",
            CliError::Runtime(_) => "runtime",
        }
    }

    /// 2 when nothing ran because the input was invalid, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self.kind() {
            "validation" | "ingest" => 2,
            _ => 1,
        }
    }

    /// One-line JSON for machine consumption.
    pub fn to_json_line(&self) -> String {
        serde_json::json!({
            "status": "error",
            "kind": self.kind(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
