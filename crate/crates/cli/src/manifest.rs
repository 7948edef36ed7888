//! Output bookkeeping: every file a command writes is listed with its SHA-256.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

pub const MANIFEST_NAME: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileEntry {
    /// Relative to the output directory, `/`-separated.
    pub path: String,
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub files: Vec<FileEntry>,
}

/// Files produced under one output directory.
pub struct Outputs {
    root: PathBuf,
    files: BTreeSet<PathBuf>,
}

impl Outputs {
    pub fn create(root: &Path) -> Result<Self, CliError> {
        fs::create_dir_all(root)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", root.display())))?;
        Ok(Self {
            root: root.to_owned(),
            files: BTreeSet::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    /// Records a file already written at `rel`.
    pub fn add(&mut self, rel: impl AsRef<Path>) {
        self.files.insert(rel.as_ref().to_owned());
    }

    /// Records every file below the directory `rel`.
    pub fn add_tree(&mut self, rel: impl AsRef<Path>) -> Result<(), CliError> {
        let mut stack = vec![rel.as_ref().to_owned()];
        while let Some(dir) = stack.pop() {
            let entries = fs::read_dir(self.root.join(&dir))
                .map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
            for entry in entries {
                let entry = entry.map_err(|e| CliError::Runtime(e.to_string()))?;
                let rel = dir.join(entry.file_name());
                if entry.path().is_dir() {
                    stack.push(rel);
                } else {
                    self.files.insert(rel);
                }
            }
        }
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, rel: &str, value: &T) -> Result<(), CliError> {
        let mut text =
            serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        self.write_bytes(rel, text.as_bytes())
    }

    pub fn write_bytes(&mut self, rel: &str, bytes: &[u8]) -> Result<(), CliError> {
        let path = self.root.join(rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)
                .map_err(|e| CliError::Runtime(format!("{}: {e}", parent.display())))?;
        }
        fs::write(&path, bytes)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        self.add(rel);
        Ok(())
    }

    /// Hashes every recorded file and writes `manifest.json`.
    pub fn finish(self, command: &str, config_hash: &str) -> Result<Manifest, CliError> {
        let mut files = Vec::with_capacity(self.files.len());
        for rel in &self.files {
            let bytes = fs::read(self.root.join(rel))
                .map_err(|e| CliError::Runtime(format!("{}: {e}", rel.display())))?;
            let path = rel
                .components()
                .map(|c| c.as_os_str().to_string_lossy().into_owned())
                .collect::<Vec<_>>()
                .join("/");
            files.push(FileEntry {
                path,
                sha256: hex::encode(Sha256::digest(&bytes)),
                bytes: bytes.len() as u64,
            });
        }
        files.sort_by(|a, b| a.path.cmp(&b.path));
        let m = Manifest {
            command: command.to_owned(),
            config_hash: config_hash.to_owned(),
            files,
        };
        let mut text =
            serde_json::to_string_pretty(&m).map_err(|e| CliError::Runtime(e.to_string()))?;
        text.push('\n');
        let path = self.root.join(MANIFEST_NAME);
        fs::write(&path, text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
        Ok(m)
    }
}
