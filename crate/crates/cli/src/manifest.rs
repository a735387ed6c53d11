//! Run manifest: every output file a command writes is recorded with a
//! content hash, merged across commands into `<run_dir>/manifest.json`.

use anyhow::{Context, Result};
use brainage_core::checkpoint::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Debug, Default, Serialize, Deserialize)]
pub struct RunManifest {
    /// Relative path -> entry; BTreeMap keeps serialization stable.
    pub outputs: BTreeMap<String, OutputEntry>,
    /// Most recent invocation per command.
    pub commands: BTreeMap<String, CommandRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OutputEntry {
    pub sha256: String,
    pub bytes: u64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct CommandRecord {
    pub seed_override: Option<u64>,
    pub threads: usize,
}

pub struct ManifestWriter {
    run_dir: PathBuf,
    manifest: RunManifest,
}

impl ManifestWriter {
    pub fn open(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join("manifest.json");
        let manifest = if path.exists() {
            serde_json::from_str(&std::fs::read_to_string(&path)?)
                .with_context(|| format!("parsing {}", path.display()))?
        } else {
            RunManifest::default()
        };
        Ok(Self {
            run_dir: run_dir.to_path_buf(),
            manifest,
        })
    }

    pub fn record_command(&mut self, name: &str, seed_override: Option<u64>, threads: usize) {
        self.manifest.commands.insert(
            name.to_string(),
            CommandRecord {
                seed_override,
                threads,
            },
        );
    }

    /// Hash one file (path relative to the run dir).
    pub fn add_file(&mut self, rel: &str) -> Result<()> {
        let path = self.run_dir.join(rel);
        let bytes = std::fs::read(&path)
            .with_context(|| format!("hashing output {}", path.display()))?;
        self.manifest.outputs.insert(
            rel.to_string(),
            OutputEntry {
                sha256: sha256_hex(&bytes),
                bytes: bytes.len() as u64,
            },
        );
        Ok(())
    }

    /// Hash every file under a directory (relative to the run dir).
    pub fn add_tree(&mut self, rel: &str) -> Result<()> {
        let root = self.run_dir.join(rel);
        let mut stack = vec![root.clone()];
        let mut files = Vec::new();
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(&dir)? {
                let path = entry?.path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    files.push(path);
                }
            }
        }
        files.sort();
        for f in files {
            let rel_path = f
                .strip_prefix(&self.run_dir)
                .expect("file under run dir")
                .to_string_lossy()
                .to_string();
            self.add_file(&rel_path)?;
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let json = serde_json::to_string_pretty(&self.manifest)?;
        std::fs::write(self.run_dir.join("manifest.json"), json)?;
        Ok(())
    }
}
