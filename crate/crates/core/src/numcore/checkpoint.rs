//! Versioned JSON checkpoints.
//!
//! Floats are written in shortest round-trip decimal form and parsed with
//! correct rounding, so every finite `f64` survives a save/load bit for bit.
//! Shape headers live inside the payload (`rows`/`cols` on every tensor) and
//! are validated on load.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const FORMAT: &str = "dpt-checkpoint";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned> Checkpoint<T> {
    pub fn new(kind: &str, payload: T) -> Self {
        Self {
            format: FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            payload,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str, kind: &str) -> Result<Self> {
        let ckpt: Self = serde_json::from_str(text)?;
        if ckpt.format != FORMAT {
            return Err(Error::input(format!(
                "not a checkpoint (format `{}`)",
                ckpt.format
            )));
        }
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::input(format!(
                "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        if ckpt.kind != kind {
            return Err(Error::input(format!(
                "checkpoint holds `{}`, expected `{kind}`",
                ckpt.kind
            )));
        }
        Ok(ckpt)
    }
}

pub fn save_checkpoint<T: Serialize + DeserializeOwned + Clone>(
    path: &Path,
    kind: &str,
    payload: &T,
) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let text = Checkpoint::new(kind, payload.clone()).to_json()?;
    fs::write(path, text)?;
    Ok(())
}

pub fn load_checkpoint<T: Serialize + DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    let text = fs::read_to_string(path)?;
    Ok(Checkpoint::from_json(&text, kind)?.payload)
}
