//! Versioned JSON checkpoints.
//!
//! Floats are written with shortest round-trip formatting, so a reloaded
//! model reproduces its forward outputs bit for bit.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    model: T,
}

pub fn save<T: Serialize>(path: &Path, format: &str, model: &T) -> Result<()> {
    let env = Envelope {
        format: format.to_string(),
        version: CHECKPOINT_VERSION,
        model,
    };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<T> = serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    if env.format != format || env.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!(
            "{}: expected {format} v{CHECKPOINT_VERSION}, found {} v{}",
            path.display(),
            env.format,
            env.version
        )));
    }
    Ok(env.model)
}
