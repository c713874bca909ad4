use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha1::{Digest, Sha1};

pub const MANIFEST_FILE: &str = "run_manifest.json";

/// Hash git would give the file's bytes as a blob object.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct InputRecord {
    pub path: PathBuf,
    /// One hash per file; directories list their files in sorted order.
    pub files: Vec<(String, String)>,
}

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub config: Value,
    pub seed: Option<u64>,
    pub inputs: Vec<InputRecord>,
    pub outputs: Vec<PathBuf>,
    pub started_at: String,
    pub wall_clock_seconds: f64,
    pub tool_version: &'static str,
}

pub struct ManifestBuilder {
    command: String,
    started: Instant,
    started_at: String,
    config: Value,
    seed: Option<u64>,
    inputs: Vec<InputRecord>,
    outputs: Vec<PathBuf>,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            started: Instant::now(),
            started_at: chrono::Local::now().to_rfc3339(),
            config: Value::Null,
            seed: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn config(&mut self, config: Value) -> &mut Self {
        self.config = config;
        self
    }

    pub fn seed(&mut self, seed: u64) -> &mut Self {
        self.seed = Some(seed);
        self
    }

    pub fn input(&mut self, path: &Path) -> Result<&mut Self> {
        let mut files = Vec::new();
        hash_tree(path, path, &mut files)?;
        self.inputs.push(InputRecord {
            path: path.to_path_buf(),
            files,
        });
        Ok(self)
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) -> &mut Self {
        self.outputs.push(path.into());
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let m = RunManifest {
            command: self.command.clone(),
            argv: std::env::args().collect(),
            config: self.config.clone(),
            seed: self.seed,
            inputs: self.inputs.clone(),
            outputs: self.outputs.clone(),
            started_at: self.started_at.clone(),
            wall_clock_seconds: self.started.elapsed().as_secs_f64(),
            tool_version: env!("CARGO_PKG_VERSION"),
        };
        let path = dir.join(MANIFEST_FILE);
        std::fs::write(&path, serde_json::to_string_pretty(&m)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}

fn hash_tree(root: &Path, path: &Path, out: &mut Vec<(String, String)>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = std::fs::read_dir(path)
            .with_context(|| format!("listing {}", path.display()))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            hash_tree(root, &e, out)?;
        }
    } else {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        let rel = path.strip_prefix(root).unwrap_or(path);
        let name = if rel.as_os_str().is_empty() {
            path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
        } else {
            rel.to_string_lossy().into_owned()
        };
        out.push((name, git_blob_hash(&bytes)));
    }
    Ok(())
}
