//! Small filesystem helpers: atomic writes (temp file + rename) so partially
//! written artifacts are never observed, plus reproducibility stamps.

use std::path::Path;

use crate::error::Result;

/// Writes `bytes` to `path` atomically: the data lands in a sibling temp file
/// first and is renamed into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("artifact"),
        std::process::id()
    ));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_atomic_str(path: &Path, text: &str) -> Result<()> {
    write_atomic(path, text.as_bytes())
}

/// Writes the `stamp.txt` reproducibility record (config hash + seed) next to
/// a command's artifacts.
pub fn write_stamp(dir: &Path, config_hash: u64, seed: u64) -> Result<()> {
    write_atomic_str(
        &dir.join("stamp.txt"),
        &format!("config_hash={config_hash:016x}\nseed={seed}\n"),
    )
}
