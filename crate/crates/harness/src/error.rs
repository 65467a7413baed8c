use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Core(#[from] normlab_core::Error),
    #[error("corrupt dataset {path}: {reason}")]
    CorruptDataset { path: PathBuf, reason: String },
    #[error("run diverged at epoch {epoch}, step {step}: loss {loss}")]
    DivergedRun {
        epoch: usize,
        step: usize,
        loss: f64,
    },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed json in {context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T> = std::result::Result<T, HarnessError>;

pub(crate) fn io_err(
    context: impl std::fmt::Display,
) -> impl FnOnce(std::io::Error) -> HarnessError {
    let context = context.to_string();
    move |source| HarnessError::Io { context, source }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(HarnessError::Config(msg.into()))
}
