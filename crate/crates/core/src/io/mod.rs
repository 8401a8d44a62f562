//! File formats, configuration, dataset layout and synthetic data.

mod checkpoint;
mod config;
mod dataset;
mod synth;
mod volume;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{DataConfig, RunConfig, SuperpixelConfig, KEYS};
pub use dataset::{read_quadrant_map, write_quadrant_map, Dataset};
pub use synth::{synth_dataset, synth_scan, SynthSpec, ORGANS};
pub use volume::{read_volume, write_volume, Volume, VolumeData, VOLUME_MAGIC, VOLUME_VERSION};

use std::path::Path;

use crate::error::{Error, Result};

/// Writes `bytes` to `path`, creating parent directories.
pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
