use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct FileDigest {
    pub path: PathBuf,
    pub sha256: String,
}

/// Record of one invocation, sufficient to re-run it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub argv: Vec<String>,
    pub cwd: PathBuf,
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub threads: Option<usize>,
    pub inputs: Vec<FileDigest>,
    pub outputs: Vec<FileDigest>,
    pub timestamp_unix: u64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let digest = Sha256::digest(&bytes);
    Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn digest(path: &Path) -> Result<FileDigest> {
    Ok(FileDigest {
        path: path.to_path_buf(),
        sha256: sha256_file(path)?,
    })
}

/// Every regular file below `dir`, sorted.
pub fn files_under(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.is_file() {
                out.push(p);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// The stack manifest itself plus every image it lists.
pub fn manifest_files(manifest: &Path) -> Result<Vec<PathBuf>> {
    let text = fs::read_to_string(manifest).with_context(|| format!("reading {}", manifest.display()))?;
    let base = manifest.parent().unwrap_or(Path::new(""));
    let mut out = vec![manifest.to_path_buf()];
    for line in text.lines().map(str::trim) {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if let Some((file, _)) = line.rsplit_once(char::is_whitespace) {
            out.push(base.join(file.trim()));
        }
    }
    Ok(out)
}

impl RunManifest {
    pub fn new(command: &str, argv: Vec<String>, config: serde_json::Value) -> Self {
        Self {
            tool: "fuselab".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            argv,
            cwd: std::env::current_dir().unwrap_or_default(),
            config,
            seeds: Vec::new(),
            threads: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            timestamp_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }

    pub fn add_inputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.inputs.push(digest(p)?);
        }
        Ok(())
    }

    pub fn add_outputs(&mut self, paths: &[PathBuf]) -> Result<()> {
        for p in paths {
            self.outputs.push(digest(p)?);
        }
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}
