//! File formats: CMOT1 tensor records, PGM frames, dataset manifests.

pub mod cmot;
pub mod manifest;
pub mod pgm;

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// Writes a file atomically: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}
