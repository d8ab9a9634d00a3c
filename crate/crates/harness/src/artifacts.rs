//! Output-directory layout and the content-hash manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{HarnessError, Result};

pub const MANIFEST: &str = "manifest.json";
/// Directory for wall-clock logs, excluded from the manifest.
pub const LOG_DIR: &str = "logs";

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub sha256: String,
}

/// Output directory with typed read/write helpers.
#[derive(Debug, Clone)]
pub struct Workspace {
    pub root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| HarnessError::io(&root, e))?;
        Ok(Workspace { root })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Absolute path for `rel`, creating its parent directory.
    pub fn prepare(&self, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if let Some(parent) = p.parent() {
            fs::create_dir_all(parent).map_err(|e| HarnessError::io(parent, e))?;
        }
        Ok(p)
    }

    pub fn exists(&self, rel: &str) -> bool {
        self.path(rel).exists()
    }

    pub fn write_json<T: Serialize>(&self, rel: &str, value: &T) -> Result<()> {
        let p = self.prepare(rel)?;
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn write_text(&self, rel: &str, text: &str) -> Result<()> {
        let p = self.prepare(rel)?;
        fs::write(&p, text).map_err(|e| HarnessError::io(&p, e))
    }

    pub fn read_json<T: DeserializeOwned>(&self, rel: &str) -> Result<T> {
        let p = self.path(rel);
        let text = fs::read_to_string(&p).map_err(|e| HarnessError::io(&p, e))?;
        serde_json::from_str(&text)
            .map_err(|e| HarnessError::Validation(format!("{}: {e}", p.display())))
    }

    /// Hash every file under the stage's directories and merge them into
    /// the manifest.
    pub fn record_stage(&self, stage: &str, rels: &[&str]) -> Result<()> {
        let mut manifest: BTreeMap<String, ManifestEntry> = if self.exists(MANIFEST) {
            self.read_json(MANIFEST)?
        } else {
            BTreeMap::new()
        };
        for rel in rels {
            for file in files_under(&self.path(rel))? {
                let bytes = fs::read(&file).map_err(|e| HarnessError::io(&file, e))?;
                let key = relative(&self.root, &file);
                manifest.insert(
                    key,
                    ManifestEntry {
                        stage: stage.to_string(),
                        sha256: sha256_hex(&bytes),
                    },
                );
            }
        }
        self.write_json(MANIFEST, &manifest)
    }

    /// All CSV and JSON artifacts with their bytes, logs excluded.
    pub fn data_artifacts(&self) -> Result<BTreeMap<String, Vec<u8>>> {
        let mut out = BTreeMap::new();
        for file in files_under(&self.root)? {
            let key = relative(&self.root, &file);
            let ext = file.extension().and_then(|e| e.to_str()).unwrap_or("");
            if key.starts_with(LOG_DIR) || !matches!(ext, "csv" | "json") {
                continue;
            }
            out.insert(
                key,
                fs::read(&file).map_err(|e| HarnessError::io(&file, e))?,
            );
        }
        Ok(out)
    }
}

fn relative(root: &Path, file: &Path) -> String {
    file.strip_prefix(root)
        .unwrap_or(file)
        .components()
        .map(|c| c.as_os_str().to_string_lossy().into_owned())
        .collect::<Vec<_>>()
        .join("/")
}

/// Files below `path` (or `path` itself), sorted.
pub fn files_under(path: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if path.is_file() {
        out.push(path.to_path_buf());
        return Ok(out);
    }
    if !path.is_dir() {
        return Ok(out);
    }
    let mut entries: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| HarnessError::io(path, e))?
        .map(|e| {
            e.map(|e| e.path())
                .map_err(|err| HarnessError::io(path, err))
        })
        .collect::<Result<_>>()?;
    entries.sort();
    for e in entries {
        out.extend(files_under(&e)?);
    }
    Ok(out)
}
