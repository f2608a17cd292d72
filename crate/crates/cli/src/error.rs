use serde_json::json;
use thiserror::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_BACKEND: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{message}")]
    Data { message: String, path: Option<String> },
    #[error("{message}")]
    Backend { message: String, endpoint: String },
}

impl CliError {
    pub fn data(message: impl Into<String>) -> Self {
        Self::Data { message: message.into(), path: None }
    }

    pub fn data_at(path: &std::path::Path, message: impl Into<String>) -> Self {
        Self::Data { message: message.into(), path: Some(path.display().to_string()) }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => EXIT_USAGE,
            Self::Data { .. } => EXIT_DATA,
            Self::Backend { .. } => EXIT_BACKEND,
        }
    }

    /// One-line JSON written to stderr on failure.
    pub fn to_json(&self) -> String {
        let v = match self {
            Self::Usage(m) => json!({"error": "usage", "message": m}),
            Self::Data { message, path } => json!({"error": "data", "message": message, "path": path}),
            Self::Backend { message, endpoint } => json!({"error": "backend", "message": message, "endpoint": endpoint}),
        };
        v.to_string()
    }
}
