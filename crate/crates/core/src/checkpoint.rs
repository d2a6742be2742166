//! Toy-detector checkpoints: one JSON file with every parameter and the
//! adaptation settings it was trained with.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversarial::{GrlConfig, RoiConfig, ToyDetector};
use crate::dataset::write_json;
use crate::error::{Error, Result};

pub const CHECKPOINT_FORMAT: &str = "podcount-toy-detector";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub detector: ToyDetector,
    pub grl: GrlConfig,
    pub roi: RoiConfig,
    /// Whether the detector was trained with the domain discriminator.
    pub adapted: bool,
}

impl Checkpoint {
    pub fn new(detector: ToyDetector, grl: GrlConfig, roi: RoiConfig, adapted: bool) -> Self {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            detector,
            grl,
            roi,
            adapted,
        }
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_json(path, ckpt)
}

/// Reads a checkpoint, refusing other formats and versions.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: not valid JSON: {e}", path.display())))?;
    let format = value.get("format").and_then(|v| v.as_str());
    if format != Some(CHECKPOINT_FORMAT) {
        return Err(Error::Checkpoint(format!(
            "{}: expected format `{CHECKPOINT_FORMAT}`, found {format:?}",
            path.display()
        )));
    }
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(u64::from(CHECKPOINT_VERSION)) {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported checkpoint version {version:?} (this build reads {CHECKPOINT_VERSION})",
            path.display()
        )));
    }
    let ckpt: Checkpoint = serde_json::from_value(value)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    ckpt.detector.check_shapes()?;
    Ok(ckpt)
}
