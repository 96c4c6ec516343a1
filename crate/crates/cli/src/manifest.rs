use std::path::{Path, PathBuf};

use beef_core::Error;
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};
use walkdir::WalkDir;

pub const FILE_NAME: &str = "run.json";

#[derive(Debug, Serialize)]
pub struct InputHash {
    pub path: PathBuf,
    pub hash: String,
}

/// Resolved configuration and input hashes of one invocation.
#[derive(Debug, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub argv: Vec<String>,
    pub version: String,
    pub config: Value,
    pub inputs: Vec<InputHash>,
    /// Hash over the resolved config and every input hash.
    pub content_hash: String,
}

fn io(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.into(),
        source: e,
    }
}

/// Object id in git's style: `H("blob <len>\0" ++ bytes)`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Blob hash of a file, or a tree hash over `<hash> <relative path>` lines
/// of every file below a directory.
pub fn hash_path(path: &Path) -> Result<String, Error> {
    if path.is_file() {
        return Ok(blob_hash(&std::fs::read(path).map_err(|e| io(path, e))?));
    }
    let mut lines = Vec::new();
    for entry in WalkDir::new(path).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let msg = e.to_string();
            io(path, e.into_io_error().unwrap_or_else(|| std::io::Error::other(msg)))
        })?;
        if entry.file_type().is_file() && entry.file_name() != FILE_NAME {
            let bytes = std::fs::read(entry.path()).map_err(|e| io(entry.path(), e))?;
            let rel = entry.path().strip_prefix(path).unwrap_or(entry.path());
            lines.push(format!("{} {}\n", blob_hash(&bytes), rel.display()));
        }
    }
    let mut h = Sha256::new();
    h.update(format!("tree {}\0", lines.len()).as_bytes());
    for l in &lines {
        h.update(l.as_bytes());
    }
    Ok(hex::encode(h.finalize()))
}

impl RunManifest {
    pub fn new(command: &str, argv: &[String], config: Value, inputs: &[PathBuf]) -> Result<Self, Error> {
        let inputs = inputs
            .iter()
            .map(|p| {
                Ok(InputHash {
                    path: p.clone(),
                    hash: hash_path(p)?,
                })
            })
            .collect::<Result<Vec<_>, Error>>()?;
        let mut h = Sha256::new();
        h.update(serde_json::to_string(&config).expect("config serializes").as_bytes());
        for i in &inputs {
            h.update(i.hash.as_bytes());
        }
        Ok(RunManifest {
            command: command.into(),
            argv: argv.to_vec(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            inputs,
            content_hash: hex::encode(h.finalize()),
        })
    }

    pub fn write(&self, dir: &Path) -> Result<(), Error> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let p = dir.join(FILE_NAME);
        std::fs::write(&p, serde_json::to_string_pretty(self).expect("manifest serializes")).map_err(|e| io(&p, e))
    }
}
