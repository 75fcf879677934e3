use serde_json::json;
use thiserror::Error;

use compose_core::ErrorKind;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] compose_core::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Config(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Config => 1,
                ErrorKind::Data => 2,
                ErrorKind::Runtime => 3,
            },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "UsageError",
            CliError::Config(_) => "ConfigError",
            CliError::Core(e) => e.name(),
        }
    }

    /// The single line written to standard error.
    pub fn to_json_line(&self) -> String {
        json!({
            "error": self.name(),
            "exit_code": self.exit_code(),
            "message": self.to_string(),
        })
        .to_string()
    }
}
