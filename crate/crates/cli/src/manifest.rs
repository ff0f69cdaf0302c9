use std::collections::BTreeMap;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use noisyquant_core::numerics::RNG_ALGORITHM;

use crate::commands::Resolved;
use crate::error::{CliError, CliResult};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: Resolved,
    pub tool_version: String,
    pub rng: String,
    pub seeds: BTreeMap<String, u64>,
    /// SHA-256 of every input file, keyed by absolute path.
    pub inputs: BTreeMap<String, String>,
    /// SHA-256 of every output file, keyed by path relative to the output directory.
    pub outputs: BTreeMap<String, String>,
    pub wall_clock_secs: f64,
}

pub fn sha256_file(path: &Path) -> CliResult<String> {
    let mut f = fs::File::open(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 1 << 16];
    loop {
        let k = f.read(&mut buf).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        if k == 0 {
            break;
        }
        hasher.update(&buf[..k]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

fn hash_tree(root: &Path, into: &mut BTreeMap<String, String>) -> CliResult<()> {
    if root.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(root)
            .map_err(|e| CliError::io(format!("{}: {e}", root.display())))?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()
            .map_err(|e| CliError::io(e.to_string()))?;
        entries.sort();
        for e in entries {
            hash_tree(&e, into)?;
        }
    } else {
        into.insert(root.display().to_string(), sha256_file(root)?);
    }
    Ok(())
}

impl RunManifest {
    pub fn new(command: &Resolved, out: &Path, outputs: &[PathBuf], wall_clock_secs: f64) -> CliResult<Self> {
        let mut inputs = BTreeMap::new();
        for p in command.inputs() {
            hash_tree(p, &mut inputs)?;
        }
        let outputs = hash_outputs(out, outputs)?;
        Ok(Self {
            command: command.clone(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            rng: RNG_ALGORITHM.to_string(),
            seeds: command.seeds().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
            inputs,
            outputs,
            wall_clock_secs,
        })
    }

    pub fn write(&self, out: &Path) -> CliResult<()> {
        let mut bytes = serde_json::to_vec_pretty(self).map_err(|e| CliError::io(e.to_string()))?;
        bytes.push(b'\n');
        noisyquant_core::numerics::io::write_atomic(&out.join(MANIFEST_FILE), &bytes)
            .map_err(|e| CliError::io(format!("cannot write manifest: {e}")))
    }

    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::config(format!("manifest {}: {e}", path.display())))
    }
}

pub fn hash_outputs(out: &Path, outputs: &[PathBuf]) -> CliResult<BTreeMap<String, String>> {
    outputs
        .iter()
        .map(|rel| Ok((rel.display().to_string(), sha256_file(&out.join(rel))?)))
        .collect()
}

/// Differences between two output hash maps, one line per file.
pub fn compare_outputs(expected: &BTreeMap<String, String>, found: &BTreeMap<String, String>) -> Vec<String> {
    let mut diffs = Vec::new();
    for (k, v) in expected {
        match found.get(k) {
            None => diffs.push(format!("missing {k}")),
            Some(w) if w != v => diffs.push(format!("changed {k}")),
            _ => {}
        }
    }
    for k in found.keys().filter(|k| !expected.contains_key(*k)) {
        diffs.push(format!("unexpected {k}"));
    }
    diffs
}
