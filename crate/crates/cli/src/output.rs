//! Output directories: config echo and a `run.json` with content hashes.
//!
//! Paths are kept out of `run.json` on purpose: two runs on identical
//! inputs must produce identical trees even when the inputs live in
//! different directories.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::config::LoadedConfig;

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Hashes every feature file referenced by a manifest along with the
/// manifest itself, so the digest changes when either does.
pub fn sha256_cohort(manifest_path: &Path) -> Result<String> {
    let manifest = alst::data::load_manifest(manifest_path)?;
    let mut h = Sha256::new();
    h.update(manifest.to_jsonl().as_bytes());
    for r in manifest.records() {
        h.update(fs::read(manifest.feature_path(r))?);
    }
    Ok(hex::encode(h.finalize()))
}

pub struct RunDir {
    pub root: PathBuf,
    command: &'static str,
    inputs: Vec<(String, String)>,
}

impl RunDir {
    pub fn create(root: &Path, command: &'static str) -> Result<Self> {
        fs::create_dir_all(root).with_context(|| format!("cannot create {}", root.display()))?;
        Ok(RunDir {
            root: root.to_path_buf(),
            command,
            inputs: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    pub fn input(&mut self, role: &str, digest: String) {
        self.inputs.push((role.to_string(), digest));
    }

    pub fn write(&self, name: &str, contents: impl AsRef<[u8]>) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, contents).with_context(|| format!("cannot write {}", p.display()))
    }

    pub fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.write(name, serde_json::to_string_pretty(value)? + "\n")
    }

    /// Writes `config.toml` (the file as given, when there was one) and
    /// `resolved_config.json`.
    pub fn echo_config<T: Serialize>(&self, loaded: &LoadedConfig, resolved: &T) -> Result<()> {
        if let Some(text) = &loaded.source {
            self.write("config.toml", text)?;
        }
        self.write_json("resolved_config.json", resolved)
    }

    /// Writes `run.json` listing the seed, input digests and the digest of
    /// every file under the run directory.
    pub fn finish(&self, seed: Option<u64>, status: &str) -> Result<()> {
        let mut outputs = serde_json::Map::new();
        for rel in files_under(&self.root)? {
            if rel == "run.json" {
                continue;
            }
            outputs.insert(rel.clone(), json!(sha256_file(&self.root.join(&rel))?));
        }
        let inputs: Vec<_> = self.inputs.iter().map(|(r, d)| json!({"role": r, "sha256": d})).collect();
        let run = json!({
            "tool": "alst",
            "version": env!("CARGO_PKG_VERSION"),
            "command": self.command,
            "seed": seed,
            "status": status,
            "inputs": inputs,
            "outputs": outputs,
        });
        self.write_json("run.json", &run)
    }
}

/// Relative paths of every file below `root`, sorted, with `/` separators.
pub fn files_under(root: &Path) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).with_context(|| format!("cannot list {}", dir.display()))? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).expect("below root");
                out.push(rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/"));
            }
        }
    }
    out.sort();
    Ok(out)
}
