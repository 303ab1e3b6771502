//! Dataset model: trajectories, instruction records, partition manifests,
//! text normalization and seeded splitting.
//!
//! Manifests are line-delimited JSON. An optional first line carries the
//! header `{"dial_manifest":{"partition":"A","version":1}}`; every other line
//! is one episode. Fields this crate does not know about are kept and written
//! back unchanged.

use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::hash::{fnv1a64, serde_hex, to_hex};

pub const MANIFEST_VERSION: u32 = 1;
const HEADER_KEY: &str = "dial_manifest";

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("instruction is empty after normalization")]
    EmptyInstruction,
    #[error("annotated fraction {0} is outside [0, 1]")]
    InvalidFraction(f64),
    #[error("manifest line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate episode id {id:?} on line {line}")]
    DuplicateEpisode { id: String, line: usize },
    #[error("manifest has no entries")]
    EmptyManifest,
    #[error("frame {asset_ref:?}: stored hash {expected} does not match content hash {actual}")]
    HashMismatch {
        asset_ref: String,
        expected: String,
        actual: String,
    },
    #[error("manifest invariant violated: {0}")]
    Invariant(String),
}

/// Lower-cases, replaces every non-alphanumeric character with a space,
/// collapses whitespace runs and trims.
pub fn normalize_instruction(text: &str) -> Result<String, DataError> {
    let mut out = String::with_capacity(text.len());
    let mut pending_space = false;
    for c in text.chars().flat_map(char::to_lowercase) {
        // Characters whose lowercase form differs from themselves are treated
        // as separators so a second pass is always the identity.
        let keep = c.is_alphanumeric() && c.to_lowercase().eq(std::iter::once(c));
        if keep {
            if pending_space && !out.is_empty() {
                out.push(' ');
            }
            pending_space = false;
            out.push(c);
        } else {
            pending_space = true;
        }
    }
    if out.is_empty() {
        Err(DataError::EmptyInstruction)
    } else {
        Ok(out)
    }
}

/// Reference to a stored observation plus its 64-bit content digest.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Frame {
    pub asset_ref: String,
    #[serde(rename = "hash", with = "serde_hex")]
    pub content_hash: u64,
}

impl Frame {
    pub fn from_bytes(asset_ref: impl Into<String>, bytes: &[u8]) -> Self {
        Self {
            asset_ref: asset_ref.into(),
            content_hash: fnv1a64(bytes),
        }
    }

    pub fn hash_hex(&self) -> String {
        to_hex(self.content_hash)
    }

    /// Checks that `bytes` are the content this frame was hashed from.
    pub fn verify(&self, bytes: &[u8]) -> Result<(), DataError> {
        let actual = fnv1a64(bytes);
        if actual == self.content_hash {
            Ok(())
        } else {
            Err(DataError::HashMismatch {
                asset_ref: self.asset_ref.clone(),
                expected: self.hash_hex(),
                actual: to_hex(actual),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub episode_id: String,
    pub first: Frame,
    pub last: Frame,
    /// Carried through unchanged; nothing in this crate interprets actions.
    pub actions: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InstructionSource {
    Crowd,
    Structured,
    Generated,
    Relabeled,
}

impl InstructionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Crowd => "crowd",
            Self::Structured => "structured",
            Self::Generated => "generated",
            Self::Relabeled => "relabeled",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMethod {
    TopK,
    MinP,
}

/// Scoring metadata attached to a relabeled instruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelMeta {
    pub cosine: f64,
    pub prob: f64,
    pub rank: usize,
    pub method: SelectionMethod,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
    pub checkpoint_hash: String,
    /// Source of the candidate in the pool (crowd or generated).
    pub pool_source: InstructionSource,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InstructionRecord {
    pub instruction_id: String,
    pub text: String,
    pub source: InstructionSource,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub episode_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotator_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relabel: Option<RelabelMeta>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl InstructionRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>, source: InstructionSource) -> Self {
        Self {
            instruction_id: id.into(),
            text: text.into(),
            source,
            episode_id: None,
            annotator_id: None,
            relabel: None,
            extra: Map::new(),
        }
    }

    /// Builds a record from raw text, normalizing it first.
    pub fn normalized(
        id: impl Into<String>,
        raw: &str,
        source: InstructionSource,
    ) -> Result<Self, DataError> {
        Ok(Self::new(id, normalize_instruction(raw)?, source))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Partition {
    A,
    B,
    C,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub trajectory: Trajectory,
    pub instructions: Vec<InstructionRecord>,
    pub extra: Map<String, Value>,
}

impl ManifestEntry {
    pub fn new(trajectory: Trajectory, instructions: Vec<InstructionRecord>) -> Self {
        Self {
            trajectory,
            instructions,
            extra: Map::new(),
        }
    }

    pub fn episode_id(&self) -> &str {
        &self.trajectory.episode_id
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetManifest {
    pub partition: Option<Partition>,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct EntryLine {
    episode_id: String,
    first: Frame,
    last: Frame,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    actions: Option<Vec<Vec<f64>>>,
    #[serde(default)]
    instructions: Vec<InstructionRecord>,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    partition: Option<Partition>,
}

impl DatasetManifest {
    pub fn new(partition: Partition, entries: Vec<ManifestEntry>) -> Self {
        Self {
            partition: Some(partition),
            entries,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, episode_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.episode_id() == episode_id)
    }

    /// All instruction texts in entry order.
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.entries
            .iter()
            .flat_map(|e| e.instructions.iter().map(|i| i.text.as_str()))
    }

    pub fn instruction_count(&self) -> usize {
        self.entries.iter().map(|e| e.instructions.len()).sum()
    }

    /// Checks id uniqueness, text normalization and the per-partition
    /// instruction requirements.
    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        for (i, entry) in self.entries.iter().enumerate() {
            if !seen.insert(entry.episode_id()) {
                return Err(DataError::DuplicateEpisode {
                    id: entry.episode_id().to_owned(),
                    line: i + 1,
                });
            }
            if entry.trajectory.first.asset_ref.is_empty() || entry.trajectory.last.asset_ref.is_empty() {
                return Err(DataError::Invariant(format!(
                    "episode {} has an empty frame reference",
                    entry.episode_id()
                )));
            }
            for ins in &entry.instructions {
                if normalize_instruction(&ins.text).as_deref() != Ok(ins.text.as_str()) {
                    return Err(DataError::Invariant(format!(
                        "instruction {} is not normalized: {:?}",
                        ins.instruction_id, ins.text
                    )));
                }
            }
            let count = |src| entry.instructions.iter().filter(|i| i.source == src).count();
            let ok = match self.partition {
                None => true,
                Some(Partition::A) => count(InstructionSource::Crowd) >= 1,
                Some(Partition::B) => {
                    entry.instructions.len() == 1 && count(InstructionSource::Structured) == 1
                }
                Some(Partition::C) => {
                    !entry.instructions.is_empty()
                        && entry
                            .instructions
                            .iter()
                            .all(|i| i.source == InstructionSource::Relabeled && i.relabel.is_some())
                }
            };
            if !ok {
                return Err(DataError::Invariant(format!(
                    "episode {} does not satisfy partition {:?} requirements",
                    entry.episode_id(),
                    self.partition
                )));
            }
        }
        Ok(())
    }
}

/// Parses a line-delimited manifest. Blank lines are skipped.
pub fn parse_manifest(bytes: &[u8]) -> Result<DatasetManifest, DataError> {
    let text = std::str::from_utf8(bytes).map_err(|e| DataError::Parse {
        line: 0,
        message: format!("not UTF-8: {e}"),
    })?;
    let mut manifest = DatasetManifest::default();
    let mut ids: HashMap<String, usize> = HashMap::new();
    let mut first_record = true;
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(line).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if let Some(header) = value.get(HEADER_KEY) {
            if !first_record {
                return Err(DataError::Parse {
                    line: line_no,
                    message: "manifest header must be the first record".into(),
                });
            }
            let header: Header =
                serde_json::from_value(header.clone()).map_err(|e| DataError::Parse {
                    line: line_no,
                    message: e.to_string(),
                })?;
            if header.version != MANIFEST_VERSION {
                return Err(DataError::Parse {
                    line: line_no,
                    message: format!("unsupported manifest version {}", header.version),
                });
            }
            manifest.partition = header.partition;
            first_record = false;
            continue;
        }
        first_record = false;
        let rec: EntryLine = serde_json::from_value(value).map_err(|e| DataError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if ids.insert(rec.episode_id.clone(), line_no).is_some() {
            return Err(DataError::DuplicateEpisode {
                id: rec.episode_id,
                line: line_no,
            });
        }
        manifest.entries.push(ManifestEntry {
            trajectory: Trajectory {
                episode_id: rec.episode_id,
                first: rec.first,
                last: rec.last,
                actions: rec.actions,
            },
            instructions: rec.instructions,
            extra: rec.extra,
        });
    }
    Ok(manifest)
}

/// Writes the canonical form: header line (when the partition is known),
/// then one compact JSON object per entry, each terminated by `\n`.
pub fn write_manifest(manifest: &DatasetManifest) -> Vec<u8> {
    let mut out = Vec::new();
    if manifest.partition.is_some() {
        let header = serde_json::json!({
            HEADER_KEY: Header { version: MANIFEST_VERSION, partition: manifest.partition }
        });
        serde_json::to_writer(&mut out, &header).expect("header serializes");
        out.push(b'\n');
    }
    for entry in &manifest.entries {
        let line = EntryLine {
            episode_id: entry.trajectory.episode_id.clone(),
            first: entry.trajectory.first.clone(),
            last: entry.trajectory.last.clone(),
            actions: entry.trajectory.actions.clone(),
            instructions: entry.instructions.clone(),
            extra: entry.extra.clone(),
        };
        serde_json::to_writer(&mut out, &line).expect("entry serializes");
        out.push(b'\n');
    }
    out
}

/// Uniformly samples `floor(fraction * n)` entries into partition A; the rest
/// form partition B. Both keep the input order.
pub fn split_dataset(
    manifest: &DatasetManifest,
    annotated_fraction: f64,
    seed: u64,
) -> Result<(DatasetManifest, DatasetManifest), DataError> {
    if !(0.0..=1.0).contains(&annotated_fraction) || annotated_fraction.is_nan() {
        return Err(DataError::InvalidFraction(annotated_fraction));
    }
    if manifest.is_empty() {
        return Err(DataError::EmptyManifest);
    }
    let total = manifest.len();
    let take = ((annotated_fraction * total as f64).floor() as usize).min(total);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; total];
    for i in rand::seq::index::sample(&mut rng, total, take) {
        chosen[i] = true;
    }
    let (mut a, mut b) = (Vec::with_capacity(take), Vec::with_capacity(total - take));
    for (entry, pick) in manifest.entries.iter().zip(chosen) {
        if pick { a.push(entry.clone()) } else { b.push(entry.clone()) }
    }
    Ok((DatasetManifest::new(Partition::A, a), DatasetManifest::new(Partition::B, b)))
}

/// Keeps one record per text in first-occurrence order. When the same text
/// arrives from several sources, the crowd-sourced record wins.
pub fn dedup_instructions(records: &[InstructionRecord]) -> Vec<InstructionRecord> {
    let mut out: Vec<InstructionRecord> = Vec::with_capacity(records.len());
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for rec in records {
        match slot.get(rec.text.as_str()) {
            Some(&i) => {
                if rec.source == InstructionSource::Crowd && out[i].source != InstructionSource::Crowd {
                    out[i] = rec.clone();
                }
            }
            None => {
                slot.insert(&rec.text, out.len());
                out.push(rec.clone());
            }
        }
    }
    out
}
