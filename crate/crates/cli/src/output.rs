//! Output directories: atomic file writes and a hashed manifest.

use crate::CliError;
use sha2::{Digest, Sha256};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

pub const MANIFEST: &str = "manifest.txt";

/// Default output root when `--out` is not given.
pub const OUT_ENV: &str = "IALAB_OUT";

pub fn default_root() -> PathBuf {
    std::env::var_os(OUT_ENV).map_or_else(|| PathBuf::from("ialab-out"), PathBuf::from)
}

/// A run's output directory. Files are written through a temp name and
/// renamed into place; `finish` writes the manifest last.
#[derive(Debug)]
pub struct OutputDir {
    path: PathBuf,
    written: Vec<(String, String)>,
}

impl OutputDir {
    /// Refuses a non-empty existing directory unless `overwrite` is set.
    pub fn create(path: &Path, overwrite: bool) -> Result<Self, CliError> {
        if path.exists() {
            let occupied = fs::read_dir(path).map_err(|e| CliError::io(path, e))?.next().is_some();
            if occupied && !overwrite {
                return Err(CliError::Usage(format!(
                    "output directory {} already exists; pass --overwrite to replace its files",
                    path.display()
                )));
            }
        }
        fs::create_dir_all(path).map_err(|e| CliError::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            written: Vec::new(),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(&self.path.join(name), bytes)?;
        self.written.push((name.to_string(), sha256_hex(bytes)));
        Ok(())
    }

    /// Writes `manifest.txt` (`<sha256>  <file>` per line, sorted by name)
    /// and returns its entries.
    pub fn finish(mut self) -> Result<Vec<(String, String)>, CliError> {
        self.written.sort();
        self.written.dedup_by(|a, b| a.0 == b.0);
        let text: String = self.written.iter().map(|(n, h)| format!("{h}  {n}\n")).collect();
        write_atomic(&self.path.join(MANIFEST), text.as_bytes())?;
        Ok(self.written)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| CliError::io(&tmp, e))?;
    f.sync_all().map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

/// Parses a manifest back into `(file, sha256)` pairs.
pub fn read_manifest(dir: &Path) -> Result<Vec<(String, String)>, CliError> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| CliError::io(&path, e))?;
    Ok(text
        .lines()
        .filter_map(|l| l.split_once("  "))
        .map(|(h, n)| (n.to_string(), h.to_string()))
        .collect())
}
