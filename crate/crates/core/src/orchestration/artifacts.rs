//! Output-directory bookkeeping: overwrite protection, config echo and the
//! hashed file manifest.

use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const CONFIG_ECHO: &str = "config.toml";
pub const CONFIG_SOURCE: &str = "config.source.toml";

/// Reserve `path` for a command's output. Existing output is an error
/// unless `overwrite`, in which case it is removed.
pub fn claim(path: &Path, overwrite: bool) -> Result<()> {
    if path.exists() {
        if !overwrite {
            return Err(Error::OutputExists(path.to_path_buf()));
        }
        if path.is_dir() {
            std::fs::remove_dir_all(path)?;
        } else {
            std::fs::remove_file(path)?;
        }
    }
    Ok(())
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn collect(dir: &Path, root: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            collect(&p, root, out)?;
        } else if p != root.join(MANIFEST_FILE) {
            out.push(p.strip_prefix(root).expect("walk stays under root").to_path_buf());
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

/// Hash every file under `root` into `root/manifest.csv`.
pub fn write_file_manifest(root: &Path) -> Result<Vec<ManifestRow>> {
    let mut files = Vec::new();
    collect(root, root, &mut files)?;
    let mut rows = Vec::with_capacity(files.len());
    for rel in files {
        let full = root.join(&rel);
        rows.push(ManifestRow {
            path: rel.to_string_lossy().replace('\\', "/"),
            bytes: std::fs::metadata(&full)?.len(),
            sha256: sha256_file(&full)?,
        });
    }
    let mut w = csv::Writer::from_path(root.join(MANIFEST_FILE))?;
    w.write_record(["path", "bytes", "sha256"])?;
    for r in &rows {
        w.write_record([r.path.as_str(), &r.bytes.to_string(), &r.sha256])?;
    }
    w.flush()?;
    Ok(rows)
}

/// Paths whose content no longer matches the manifest.
pub fn verify_file_manifest(root: &Path) -> Result<Vec<String>> {
    let mut r = csv::Reader::from_path(root.join(MANIFEST_FILE))?;
    let mut bad = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let path = root.join(&rec[0]);
        if !path.exists() || sha256_file(&path)? != rec[2] {
            bad.push(rec[0].to_string());
        }
    }
    Ok(bad)
}
