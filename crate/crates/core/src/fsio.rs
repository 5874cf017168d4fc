use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Sibling of `path` used while writing it.
pub fn partial_path(path: &Path) -> Result<PathBuf> {
    let mut name = path
        .file_name()
        .ok_or_else(|| Error::invalid("write", format!("{} has no file name", path.display())))?
        .to_os_string();
    name.push(".partial");
    Ok(path.with_file_name(name))
}

/// Writes `bytes` to a sibling file and renames it over `path`, so readers
/// never observe a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = partial_path(path)?;
    if let Err(e) = fs::write(&tmp, bytes) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
