//! Artifact manifest: every file a run produces, listed with a content hash
//! so identical configurations can be checked for byte-identical outputs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::CliError;

/// FNV-1a over the file bytes; stable and dependency-free.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for b in bytes {
        hash ^= *b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

#[derive(Debug, Default)]
pub struct Manifest {
    produced: Vec<PathBuf>,
}

impl Manifest {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, path: &Path) {
        if !self.produced.iter().any(|p| p == path) {
            self.produced.push(path.to_path_buf());
        }
    }

    pub fn is_empty(&self) -> bool {
        self.produced.is_empty()
    }

    /// Write `manifest.txt` in the output directory: one `hash  path` line
    /// per file, sorted by path. Entries from an earlier manifest are kept
    /// (and re-hashed if their file still exists) so single-stage runs
    /// extend the inventory instead of truncating it.
    pub fn write(&self, out_dir: &Path) -> Result<PathBuf, CliError> {
        let manifest_path = out_dir.join("manifest.txt");
        let mut entries: std::collections::BTreeMap<String, u64> = std::collections::BTreeMap::new();
        if let Ok(existing) = fs::read_to_string(&manifest_path) {
            for line in existing.lines() {
                if let Some((_, rel)) = line.split_once("  ") {
                    let path = out_dir.join(rel);
                    if let Ok(bytes) = fs::read(&path) {
                        entries.insert(rel.to_string(), fnv1a64(&bytes));
                    }
                }
            }
        }
        for path in &self.produced {
            let bytes = fs::read(path)
                .map_err(|e| CliError::Runtime(format!("hashing {}: {e}", path.display())))?;
            let rel = path.strip_prefix(out_dir).unwrap_or(path);
            entries.insert(rel.display().to_string(), fnv1a64(&bytes));
        }
        let mut w = fs::File::create(&manifest_path)
            .map_err(|e| CliError::Runtime(format!("writing manifest: {e}")))?;
        for (rel, hash) in entries {
            writeln!(w, "{hash:016x}  {rel}")
                .map_err(|e| CliError::Runtime(format!("writing manifest: {e}")))?;
        }
        Ok(manifest_path)
    }
}
