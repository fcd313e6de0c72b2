//! Reproducibility records: config snapshot, seed and artifact digests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use onj_core::VolumeGrid;

use crate::config::PipelineConfig;
use crate::error::{read_file, write_file, Error, Result};
use crate::volio::{decode_volume, write_volume};

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub command: String,
    pub seed: u64,
    pub config: Vec<(String, String)>,
    /// `(path, sha256 hex)` in write order.
    pub artifacts: Vec<(PathBuf, String)>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl Record {
    pub fn new(command: &str, cfg: &PipelineConfig) -> Self {
        Record { command: command.to_string(), seed: cfg.seed, config: cfg.snapshot(), artifacts: Vec::new() }
    }

    /// Hashes a file already on disk.
    pub fn file(&mut self, path: &Path) -> Result<()> {
        let bytes = read_file(path)?;
        self.artifacts.push((path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    /// Writes a volume, reads it back to confirm it decodes to the same
    /// grid, and records its digest.
    pub fn volume(&mut self, path: &Path, vol: &VolumeGrid) -> Result<()> {
        write_volume(vol, path)?;
        let bytes = read_file(path)?;
        if decode_volume(&bytes, path)? != *vol {
            return Err(Error::format(path, "volume did not read back identically"));
        }
        self.artifacts.push((path.to_path_buf(), sha256_hex(&bytes)));
        Ok(())
    }

    pub fn extend(&mut self, other: &Record) {
        self.artifacts.extend(other.artifacts.iter().cloned());
    }

    /// Artifact paths are written relative to `root` when possible.
    pub fn to_text(&self, root: &Path) -> String {
        let mut s = String::new();
        writeln!(s, "command {}", self.command).unwrap();
        writeln!(s, "seed {}", self.seed).unwrap();
        writeln!(s, "[config]").unwrap();
        for (k, v) in &self.config {
            writeln!(s, "{k}={v}").unwrap();
        }
        writeln!(s, "[artifacts]").unwrap();
        for (p, h) in &self.artifacts {
            let rel = p.strip_prefix(root).unwrap_or(p);
            writeln!(s, "{h} {}", rel.display()).unwrap();
        }
        s
    }

    pub fn write(&self, path: &Path, root: &Path) -> Result<()> {
        write_file(path, self.to_text(root).as_bytes())
    }
}
