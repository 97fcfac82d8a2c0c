use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("invalid scenario field `{field}`: {msg}")]
    Invalid { field: String, msg: String },

    #[error("scenario parse error: {0}")]
    Parse(#[from] toml::de::Error),

    #[error("scenario serialization failed: {0}")]
    Serialize(#[from] toml::ser::Error),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Core(#[from] izmpc::error::Error),

    #[error("{0}")]
    Run(String),
}

impl CliError {
    pub fn invalid(field: impl Into<String>, msg: impl Into<String>) -> Self {
        CliError::Invalid {
            field: field.into(),
            msg: msg.into(),
        }
    }

    pub fn io(path: &Path, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;
