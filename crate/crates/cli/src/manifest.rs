//! Run manifests: the exact invocation plus hashes of every input read and
//! every output written.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::Invocation;

pub const TOOL: &str = "gradmap";

pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(hex::encode(hasher.finalize()))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    /// Every flag, defaults included.
    pub invocation: Invocation,
    /// Values resolved at run time, e.g. the predicted class.
    pub resolved: serde_json::Value,
    pub seed: Option<u64>,
    /// Input path → sha256.
    pub inputs: BTreeMap<String, String>,
    /// Output file name (relative to the manifest's directory) → sha256.
    pub outputs: BTreeMap<String, String>,
}

/// What a command read and wrote, for its manifest.
#[derive(Debug, Default)]
pub struct RunRecord {
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
    pub resolved: serde_json::Value,
}

impl RunManifest {
    pub fn build(invocation: &Invocation, record: &RunRecord) -> Result<Self> {
        let mut inputs = BTreeMap::new();
        for p in &record.inputs {
            inputs.insert(p.display().to_string(), sha256_file(p)?);
        }
        let mut outputs = BTreeMap::new();
        for p in &record.outputs {
            let name = p
                .file_name()
                .with_context(|| format!("output {} has no file name", p.display()))?;
            outputs.insert(name.to_string_lossy().into_owned(), sha256_file(p)?);
        }
        Ok(Self {
            tool: TOOL.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: invocation.name().into(),
            invocation: invocation.clone(),
            resolved: record.resolved.clone(),
            seed: invocation.seed(),
            inputs,
            outputs,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(path, json).with_context(|| format!("writing {}", path.display()))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_slice(&bytes).with_context(|| format!("parsing manifest {}", path.display()))
    }
}
