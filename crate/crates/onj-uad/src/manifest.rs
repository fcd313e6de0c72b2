//! Cohort manifests: one `id seed path` line per subject, paths relative to
//! the manifest's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{read_file, write_file, Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub id: String,
    pub seed: u64,
    pub path: PathBuf,
}

pub fn write_manifest(entries: &[Entry], path: &Path) -> Result<()> {
    let mut s = String::new();
    for e in entries {
        if e.id.is_empty() || e.id.contains(char::is_whitespace) {
            return Err(Error::format(path, format!("subject id {:?} must be nonempty without spaces", e.id)));
        }
        let p = e.path.to_str().filter(|p| !p.contains(char::is_whitespace));
        let p = p.ok_or_else(|| Error::format(path, format!("path {:?} must be UTF-8 without spaces", e.path)))?;
        writeln!(s, "{} {} {}", e.id, e.seed, p).unwrap();
    }
    write_file(path, s.as_bytes())
}

pub fn read_manifest(path: &Path) -> Result<Vec<Entry>> {
    let bytes = read_file(path)?;
    let text = String::from_utf8(bytes).map_err(|_| Error::format(path, "manifest is not UTF-8"))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split_whitespace().collect();
        let bad = || Error::format(path, format!("line {}: expected `id seed path`", i + 1));
        if f.len() != 3 {
            return Err(bad());
        }
        out.push(Entry {
            id: f[0].to_string(),
            seed: f[1].parse().map_err(|_| bad())?,
            path: PathBuf::from(f[2]),
        });
    }
    Ok(out)
}

/// Resolves an entry's path against the manifest location.
pub fn resolve(manifest: &Path, entry: &Entry) -> PathBuf {
    manifest.parent().unwrap_or(Path::new(".")).join(&entry.path)
}
