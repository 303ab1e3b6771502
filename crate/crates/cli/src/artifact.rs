//! Stage inputs and outputs. Outputs are written through a temp file and a
//! rename; each one gets a `<file>.prov.json` stamp next to it.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use dial_core::hash::{fnv1a64, to_hex};
use serde::{Deserialize, Serialize};

use crate::CliError;

pub const STAMP_SUFFIX: &str = ".prov.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stamp {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub config: serde_json::Value,
    /// Input path → content hash at the time it was read.
    pub inputs: BTreeMap<String, String>,
    pub output: String,
}

pub fn stamp_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(STAMP_SUFFIX);
    PathBuf::from(s)
}

pub fn content_hash(bytes: &[u8]) -> String {
    to_hex(fnv1a64(bytes))
}

pub fn read_stamp(path: &Path) -> Result<Option<Stamp>, CliError> {
    let sp = stamp_path(path);
    match std::fs::read(&sp) {
        Ok(bytes) => serde_json::from_slice(&bytes)
            .map(Some)
            .map_err(|e| CliError::Io { path: sp, message: format!("bad provenance stamp: {e}") }),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
        Err(e) => Err(CliError::Io { path: sp, message: e.to_string() }),
    }
}

/// Writes `bytes` to a sibling temp file, syncs it and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io { path: path.to_owned(), message: e.to_string() };
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(io)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    tmp.write_all(bytes).map_err(io)?;
    tmp.as_file().sync_all().map_err(io)?;
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

/// Bookkeeping for one stage invocation.
pub struct StageRun {
    stage: &'static str,
    seed: u64,
    config: serde_json::Value,
    config_hash: String,
    inputs: BTreeMap<String, String>,
}

impl StageRun {
    pub fn new(stage: &'static str, seed: u64, config: &impl Serialize) -> Self {
        let config = serde_json::to_value(config).expect("stage config serializes");
        let config_hash = content_hash(config.to_string().as_bytes());
        Self { stage, seed, config, config_hash, inputs: BTreeMap::new() }
    }

    pub fn stage(&self) -> &'static str {
        self.stage
    }

    /// Reads a required input. A missing file is a dependency error naming
    /// `artifact` and the stage that makes it; a file whose own stamp
    /// disagrees with its content is rejected as stale.
    pub fn input(&mut self, path: &Path, artifact: &'static str, producer: &'static str) -> Result<Vec<u8>, CliError> {
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(CliError::Dependency { artifact, path: path.to_owned(), producer })
            }
            Err(e) => return Err(CliError::Io { path: path.to_owned(), message: e.to_string() }),
        };
        let hash = content_hash(&bytes);
        if let Some(stamp) = read_stamp(path)? {
            if stamp.output != hash {
                return Err(CliError::Stale { artifact, path: path.to_owned() });
            }
        }
        self.inputs.insert(path.display().to_string(), hash);
        Ok(bytes)
    }

    /// Writes an output and its stamp.
    pub fn output(&self, path: &Path, bytes: &[u8]) -> Result<(), CliError> {
        write_atomic(path, bytes)?;
        let stamp = Stamp {
            stage: self.stage.to_owned(),
            seed: self.seed,
            config_hash: self.config_hash.clone(),
            config: self.config.clone(),
            inputs: self.inputs.clone(),
            output: content_hash(bytes),
        };
        let mut text = serde_json::to_vec_pretty(&stamp).expect("stamp serializes");
        text.push(b'\n');
        write_atomic(&stamp_path(path), &text)
    }
}

pub fn to_json_bytes(value: &impl Serialize) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("value serializes");
    out.push(b'\n');
    out
}

pub fn to_jsonl_bytes<T: Serialize>(items: &[T]) -> Vec<u8> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).expect("value serializes");
        out.push(b'\n');
    }
    out
}

pub fn parse_jsonl<T: for<'de> Deserialize<'de>>(bytes: &[u8], path: &Path) -> Result<Vec<T>, CliError> {
    let text = std::str::from_utf8(bytes).map_err(|e| CliError::Io { path: path.to_owned(), message: e.to_string() })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| CliError::Io { path: path.to_owned(), message: format!("line {}: {e}", i + 1) })
        })
        .collect()
}
