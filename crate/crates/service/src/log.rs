//! Append-only submission log, one JSON object per line.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::ServiceError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SubmissionKind {
    Annotation,
    Rating,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationPayload {
    pub episode_id: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingPayload {
    pub episode_id: String,
    pub instruction_id: String,
    pub accurate: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Payload {
    Rating(RatingPayload),
    Annotation(AnnotationPayload),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub seq: u64,
    pub kind: SubmissionKind,
    pub key: String,
    pub annotator_id: String,
    pub timestamp_ms: u64,
    pub payload: Payload,
}

impl LogRecord {
    pub fn annotation_key(episode_id: &str, annotator_id: &str) -> String {
        serde_json::json!(["annotation", episode_id, annotator_id]).to_string()
    }

    pub fn rating_key(episode_id: &str, instruction_id: &str, annotator_id: &str) -> String {
        serde_json::json!(["rating", episode_id, annotator_id, instruction_id]).to_string()
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

pub struct SubmissionLog {
    path: PathBuf,
    file: File,
}

impl SubmissionLog {
    /// Opens the log for appending and returns every complete record in it.
    /// A torn final line from an interrupted write is dropped.
    pub fn open(path: &Path) -> Result<(Self, Vec<LogRecord>), ServiceError> {
        let bytes = match std::fs::read(path) {
            Ok(bytes) => bytes,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(ServiceError::Io(format!("{}: {e}", path.display()))),
        };
        let records = parse_log(&bytes)?;
        if !bytes.is_empty() && !bytes.ends_with(b"\n") {
            let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            let f = OpenOptions::new().write(true).open(path).map_err(io(path))?;
            f.set_len(keep as u64).map_err(io(path))?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path).map_err(io(path))?;
        Ok((Self { path: path.to_owned(), file }, records))
    }

    pub fn append(&mut self, record: &LogRecord) -> Result<(), ServiceError> {
        let mut line = serde_json::to_vec(record).expect("log records serialize");
        line.push(b'\n');
        self.file.write_all(&line).map_err(io(&self.path))?;
        self.file.sync_data().map_err(io(&self.path))
    }
}

fn io(path: &Path) -> impl Fn(std::io::Error) -> ServiceError + '_ {
    move |e| ServiceError::Io(format!("{}: {e}", path.display()))
}

pub fn parse_log(bytes: &[u8]) -> Result<Vec<LogRecord>, ServiceError> {
    let text = String::from_utf8_lossy(bytes);
    let complete = match text.rfind('\n') {
        Some(i) => &text[..=i],
        None => "",
    };
    complete
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| ServiceError::CorruptLog(format!("line {}: {e}", i + 1)))
        })
        .collect()
}
