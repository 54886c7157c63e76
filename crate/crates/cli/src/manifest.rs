//! Run manifests: enough metadata next to every output directory to
//! re-run the producing command bit-identically.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: String,
    pub created_utc: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    /// SHA-256 of the canonical JSON in `config`.
    pub config_sha256: String,
    /// The fully resolved configuration (file values plus flag overrides).
    pub config: serde_json::Value,
    /// Input path to SHA-256 content digest.
    pub inputs: BTreeMap<String, String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for digest", path.display()))?;
    Ok(sha256_hex(&bytes))
}

/// Collects inputs, then writes `manifest.json` into the output directory.
pub struct ManifestBuilder {
    command: String,
    seed: Option<u64>,
    config: serde_json::Value,
    inputs: BTreeMap<String, String>,
}

impl ManifestBuilder {
    pub fn new(command: &str) -> Self {
        ManifestBuilder {
            command: command.to_string(),
            seed: None,
            config: serde_json::Value::Null,
            inputs: BTreeMap::new(),
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn config<T: Serialize>(mut self, config: &T) -> Result<Self> {
        self.config = serde_json::to_value(config).context("serializing config for manifest")?;
        Ok(self)
    }

    pub fn input(mut self, path: &Path) -> Result<Self> {
        self.inputs
            .insert(path.display().to_string(), sha256_file(path)?);
        Ok(self)
    }

    /// Digests every regular file directly inside `dir`, sorted by name.
    pub fn input_dir(mut self, dir: &Path) -> Result<Self> {
        let mut names: Vec<_> = std::fs::read_dir(dir)
            .with_context(|| format!("listing {}", dir.display()))?
            .collect::<std::io::Result<Vec<_>>>()?
            .into_iter()
            .map(|e| e.path())
            .filter(|p| p.is_file())
            .collect();
        names.sort();
        for path in names {
            self.inputs
                .insert(path.display().to_string(), sha256_file(&path)?);
        }
        Ok(self)
    }

    pub fn write(self, out_dir: &Path) -> Result<()> {
        let canonical =
            serde_json::to_string(&self.config).context("hashing config for manifest")?;
        let manifest = RunManifest {
            tool: "txcast",
            version: env!("CARGO_PKG_VERSION"),
            command: self.command,
            created_utc: chrono::Utc::now().to_rfc3339(),
            seed: self.seed,
            config_sha256: sha256_hex(canonical.as_bytes()),
            config: self.config,
            inputs: self.inputs,
        };
        let path = out_dir.join(MANIFEST_FILE);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
        Ok(())
    }
}
