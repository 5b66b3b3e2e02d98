//! Content hashes and the `config.json` stamp written next to every output.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const STAMP_FILE: &str = "config.json";

/// Hex SHA-256 over the given byte strings, each prefixed by its length so
/// that concatenation boundaries matter.
pub fn hash_parts(parts: &[&[u8]]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    let mut out = String::with_capacity(64);
    for b in h.finalize() {
        write!(out, "{b:02x}").expect("writing to a String");
    }
    out
}

/// Hash of a serializable config in canonical form (sorted keys, compact).
pub fn config_hash(config: &impl Serialize) -> String {
    let value = serde_json::to_value(config).expect("serializable config");
    hash_parts(&[value.to_string().as_bytes()])
}

/// Hash of the contents of a list of input files.
pub fn input_hash(paths: &[&Path]) -> Result<String> {
    let mut contents = Vec::new();
    for p in paths {
        contents.push(std::fs::read(p).map_err(|e| Error::io(*p, e))?);
    }
    let refs: Vec<&[u8]> = contents.iter().map(Vec::as_slice).collect();
    Ok(hash_parts(&refs))
}

/// Reproducibility record: the command, its fully resolved config and a
/// hash of the inputs it read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub command: String,
    pub config: serde_json::Value,
    pub input_hash: String,
}

impl Stamp {
    pub fn new(command: &str, config: &impl Serialize, input_hash: String) -> Self {
        Stamp {
            command: command.to_string(),
            config: serde_json::to_value(config).expect("serializable config"),
            input_hash,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(STAMP_FILE);
        let text = serde_json::to_string_pretty(self).expect("serializable") + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(STAMP_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            msg: e.to_string(),
        })
    }
}
