//! Command failures and their exit codes.

use std::path::Path;

use serde_json::json;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Numerical(#[from] excursia_core::Error),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Numerical(_) => 3,
            Self::Io { .. } => 4,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Self::Config(_) => "config",
            Self::Numerical(_) => "numerical",
            Self::Io { .. } => "io",
        }
    }

    /// Machine-readable error document.
    pub fn to_json(&self) -> serde_json::Value {
        let stage = match self {
            Self::Numerical(excursia_core::Error::Stage { stage, .. }) => Some(*stage),
            _ => None,
        };
        json!({
            "schema": crate::SCHEMA,
            "status": "error",
            "kind": self.kind(),
            "exit_code": self.exit_code(),
            "stage": stage,
            "message": self.to_string(),
        })
    }
}
