//! Provenance written next to every output: the command, its resolved
//! arguments and the SHA-256 of every file read or written.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

#[derive(Debug, Default)]
pub struct Manifest {
    entries: BTreeMap<String, String>,
    inputs: BTreeMap<String, String>,
    outputs: Vec<PathBuf>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Manifest {
    pub fn new(command: &str) -> Self {
        let mut m = Manifest::default();
        m.set("command", command);
        m.set("version", env!("CARGO_PKG_VERSION"));
        m
    }

    pub fn set(&mut self, key: &str, value: impl ToString) {
        self.entries.insert(key.to_owned(), value.to_string());
    }

    /// Records every field of the command's arguments as `arg.<name>`.
    pub fn args<T: Serialize>(&mut self, args: &T) {
        if let Ok(serde_json::Value::Object(map)) = serde_json::to_value(args) {
            for (k, v) in map {
                let v = match v {
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Null => continue,
                    other => other.to_string(),
                };
                self.set(&format!("arg.{k}"), v);
            }
        }
    }

    /// Reads a file, recording its hash.
    pub fn read(&mut self, path: &Path) -> Result<Vec<u8>> {
        let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        self.inputs.insert(path.display().to_string(), sha256_hex(&bytes));
        Ok(bytes)
    }

    pub fn read_string(&mut self, path: &Path) -> Result<String> {
        String::from_utf8(self.read(path)?).with_context(|| format!("{} is not UTF-8", path.display()))
    }

    pub fn write(&mut self, path: &Path, bytes: &[u8]) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))?;
        self.outputs.push(path.to_owned());
        Ok(())
    }

    pub fn render(&self) -> Result<String> {
        let mut out = String::new();
        for (k, v) in &self.entries {
            out.push_str(&format!("{k}={v}\n"));
        }
        for (k, v) in &self.inputs {
            out.push_str(&format!("input.{k}=sha256:{v}\n"));
        }
        let mut outputs: Vec<&PathBuf> = self.outputs.iter().collect();
        outputs.sort();
        for p in outputs {
            let bytes = fs::read(p)?;
            out.push_str(&format!("output.{}=sha256:{}\n", p.display(), sha256_hex(&bytes)));
        }
        Ok(out)
    }

    /// Writes the manifest to `path`.
    pub fn finish(self, path: &Path) -> Result<()> {
        let text = self.render()?;
        fs::write(path, text).with_context(|| format!("writing {}", path.display()))
    }
}

/// Manifest location for an output file (`out.manifest`) or directory
/// (`out/manifest.txt`).
pub fn manifest_path(out: &Path, is_dir: bool) -> PathBuf {
    if is_dir {
        out.join("manifest.txt")
    } else {
        let mut s = out.as_os_str().to_owned();
        s.push(".manifest");
        PathBuf::from(s)
    }
}
