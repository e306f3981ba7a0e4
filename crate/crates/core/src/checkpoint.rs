//! Versioned JSON containers for learned objects.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "tom-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format: String,
    pub version: u32,
    pub kind: String,
    pub payload: T,
}

impl<T> Checkpoint<T> {
    pub fn new(kind: &str, payload: T) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            kind: kind.to_string(),
            payload,
        }
    }
}

pub fn save<T: Serialize>(path: &Path, kind: &str, payload: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &Checkpoint::new(kind, payload))?;
    w.flush()?;
    Ok(())
}

pub fn load<T: DeserializeOwned>(path: &Path, kind: &str) -> Result<T> {
    let ckpt: Checkpoint<T> = serde_json::from_reader(BufReader::new(File::open(path)?))?;
    if ckpt.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("{} is not a checkpoint", path.display())));
    }
    if ckpt.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!(
            "checkpoint version {} unsupported (expected {CHECKPOINT_VERSION})",
            ckpt.version
        )));
    }
    if ckpt.kind != kind {
        return Err(Error::Format(format!("expected a {kind} checkpoint, found {}", ckpt.kind)));
    }
    Ok(ckpt.payload)
}
