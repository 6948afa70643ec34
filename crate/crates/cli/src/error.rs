use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("config key `{key}`: {msg}")]
    Key { key: String, msg: String },
    #[error("missing checkpoint {}; run `{hint}` first", .path.display())]
    MissingCheckpoint { path: PathBuf, hint: String },
    #[error("{failed} of {total} runs failed: {cells}")]
    Runs { failed: usize, total: usize, cells: String },
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Core(#[from] peftcl_core::Error),
}

impl CliError {
    pub fn key(key: &str, msg: impl Into<String>) -> Self {
        CliError::Key {
            key: key.to_string(),
            msg: msg.into(),
        }
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;
