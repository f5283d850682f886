//! Content hashes and the per-run summary.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Hash of a file, or of a directory as the sorted list of
/// `relative path, file hash` pairs.
pub fn content_hash(path: &Path) -> Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?));
    }
    if !path.is_dir() {
        bail!("{} does not exist", path.display());
    }
    let mut files = Vec::new();
    collect_files(path, path, &mut files)?;
    files.sort();
    let mut manifest = String::new();
    for rel in files {
        let h = sha256_hex(&fs::read(path.join(&rel)).with_context(|| format!("reading {}", rel.display()))?);
        manifest.push_str(&format!("{}  {h}\n", rel.display()));
    }
    Ok(sha256_hex(manifest.as_bytes()))
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            out.push(path.strip_prefix(root)?.to_path_buf());
        }
    }
    Ok(())
}

/// Machine-readable record of one run. Holds no timestamps, so identical
/// runs write identical summaries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub command: String,
    pub seed: u64,
    pub config_sha256: String,
    /// Input role to content hash.
    pub inputs: BTreeMap<String, String>,
    /// Output name, relative to the output directory, to content hash.
    pub outputs: BTreeMap<String, String>,
    /// Command-specific results.
    pub results: serde_json::Value,
}

/// What a command hands back for the summary.
#[derive(Debug, Default)]
pub struct Outcome {
    pub inputs: Vec<(String, PathBuf)>,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
    pub results: serde_json::Value,
}

/// Hashes every input and output; fails if any requested artifact is
/// missing.
pub fn write_summary(out: &Path, command: &str, seed: u64, config_json: &[u8], outcome: &Outcome) -> Result<Summary> {
    let mut inputs = BTreeMap::new();
    for (role, path) in &outcome.inputs {
        inputs.insert(role.clone(), content_hash(path)?);
    }
    let mut outputs = BTreeMap::new();
    for name in &outcome.outputs {
        let path = out.join(name);
        outputs.insert(name.clone(), content_hash(&path).with_context(|| format!("artifact {name} was not written"))?);
    }
    let summary = Summary {
        command: command.to_string(),
        seed,
        config_sha256: sha256_hex(config_json),
        inputs,
        outputs,
        results: outcome.results.clone(),
    };
    let path = out.join("summary.json");
    let mut bytes = serde_json::to_vec_pretty(&summary)?;
    bytes.push(b'\n');
    fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(summary)
}
