//! Datasets, experiment networks, training loops and the two experiments
//! (fixed-statistics sweep and StatDiff trace) behind the `normlab` CLI.

pub mod data;
pub mod error;
pub mod models;
pub mod report;
pub mod suite;
pub mod sweep;
pub mod trace;
pub mod train;

use std::path::Path;

use serde::de::DeserializeOwned;

pub use error::{HarnessError, Result};

/// Reads a JSON file into `T`.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(error::io_err(path.display()))?;
    serde_json::from_str(&text).map_err(|source| HarnessError::Json {
        context: path.display().to_string(),
        source,
    })
}
