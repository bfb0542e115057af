//! File formats and dataset ingestion.

pub mod blender;
pub mod checkpoint;
pub mod config;
pub mod image_file;

use crate::error::{Error, Result};
use std::path::Path;

/// Whole-file atomic write: the bytes land under a temporary name in the
/// target directory and are renamed into place, so readers never observe a
/// partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().filter(|p| !p.as_os_str().is_empty());
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::io(path, std::io::Error::other("path has no file name")))?;
    let mut tmp_name = file_name.to_os_string();
    tmp_name.push(format!(".tmp-{}", std::process::id()));
    let tmp = match parent {
        Some(dir) => dir.join(&tmp_name),
        None => tmp_name.into(),
    };
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
