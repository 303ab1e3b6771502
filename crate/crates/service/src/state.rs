//! Effective state derived from the loaded datasets and the submission log.

use std::collections::{BTreeMap, HashMap, HashSet};

use dial_core::data::{normalize_instruction, Frame};
use dial_core::eval::{EvalReport, RankReport, RankRow};
use dial_core::{DatasetManifest, InstructionRecord, InstructionSource, ManifestEntry, Partition};
use serde::{Deserialize, Serialize};

use crate::log::{AnnotationPayload, LogRecord, Payload, RatingPayload, SubmissionKind};
use crate::ServiceError;

pub const ANNOTATION_PROMPT: &str = "describe how a robot should be commanded to go from the start to the end";
pub const DEFAULT_QUOTA: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationTask {
    pub episode_id: String,
    pub first_frame_url: String,
    pub last_frame_url: String,
    pub prompt: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingCandidate {
    pub instruction_id: String,
    pub text: String,
    pub rank: usize,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingTask {
    pub episode_id: String,
    pub first_frame_url: String,
    pub last_frame_url: String,
    pub candidates: Vec<RatingCandidate>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSubmission {
    pub episode_id: String,
    pub text: String,
    pub annotator_id: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatingSubmission {
    pub episode_id: String,
    pub instruction_id: String,
    pub accurate: bool,
    pub annotator_id: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub key: String,
    /// False when the key was already present and nothing was stored.
    pub stored: bool,
    pub seq: u64,
}

fn frame_url(frame: &Frame) -> String {
    format!("/assets/{}", frame.hash_hex())
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Effective {
    keys: HashMap<String, u64>,
    /// episode → (annotator, text) in log order.
    annotations: BTreeMap<String, Vec<(String, String)>>,
    /// (episode, instruction) → votes in log order.
    ratings: BTreeMap<(String, String), Vec<bool>>,
    /// (episode, annotator) → instructions rated.
    rated_by: HashMap<(String, String), HashSet<String>>,
    next_seq: u64,
}

pub struct Store {
    quota: usize,
    dataset: Option<DatasetManifest>,
    relabels: Option<DatasetManifest>,
    effective: Effective,
    /// annotator → index of the last episode handed out, per workflow.
    cursors: HashMap<(SubmissionKind, String), usize>,
}

impl Store {
    pub fn new(dataset: Option<DatasetManifest>, relabels: Option<DatasetManifest>, quota: usize) -> Self {
        Self { quota, dataset, relabels, effective: Effective { next_seq: 1, ..Default::default() }, cursors: HashMap::new() }
    }

    /// Every frame referenced by either dataset, keyed by hex content hash.
    pub fn frames(&self) -> HashMap<String, Frame> {
        self.dataset
            .iter()
            .chain(&self.relabels)
            .flat_map(|d| &d.entries)
            .flat_map(|e| [&e.trajectory.first, &e.trajectory.last])
            .map(|f| (f.hash_hex(), f.clone()))
            .collect()
    }

    /// Applies a record read back from the log under the same rules as a
    /// live submission.
    pub fn replay(&mut self, record: &LogRecord) {
        self.apply(record);
        self.effective.next_seq = self.effective.next_seq.max(record.seq + 1);
    }

    fn apply(&mut self, record: &LogRecord) -> bool {
        if self.effective.keys.contains_key(&record.key) {
            return false;
        }
        match (&record.kind, &record.payload) {
            (SubmissionKind::Annotation, Payload::Annotation(p)) => {
                let list = self.effective.annotations.entry(p.episode_id.clone()).or_default();
                if list.len() >= self.quota {
                    return false;
                }
                list.push((record.annotator_id.clone(), p.text.clone()));
            }
            (SubmissionKind::Rating, Payload::Rating(p)) => {
                self.effective
                    .ratings
                    .entry((p.episode_id.clone(), p.instruction_id.clone()))
                    .or_default()
                    .push(p.accurate);
                self.effective
                    .rated_by
                    .entry((p.episode_id.clone(), record.annotator_id.clone()))
                    .or_default()
                    .insert(p.instruction_id.clone());
            }
            _ => return false,
        }
        self.effective.keys.insert(record.key.clone(), record.seq);
        true
    }

    fn annotations_of(&self, episode_id: &str) -> &[(String, String)] {
        self.effective.annotations.get(episode_id).map_or(&[], Vec::as_slice)
    }

    fn dataset(&self) -> Result<&DatasetManifest, ServiceError> {
        self.dataset.as_ref().ok_or(ServiceError::NotReady("no annotation dataset loaded"))
    }

    fn relabels(&self) -> Result<&DatasetManifest, ServiceError> {
        self.relabels.as_ref().ok_or(ServiceError::NotReady("no relabeled dataset loaded"))
    }

    /// Picks the next eligible entry after this annotator's previous one,
    /// wrapping around, so successive calls walk through the dataset.
    fn next_index(&mut self, kind: SubmissionKind, annotator: &str, eligible: &[usize]) -> Option<usize> {
        let cursor = self.cursors.get(&(kind, annotator.to_owned())).copied();
        let pick = match cursor {
            Some(c) => eligible.iter().copied().find(|&i| i > c).or_else(|| eligible.first().copied()),
            None => eligible.first().copied(),
        }?;
        self.cursors.insert((kind, annotator.to_owned()), pick);
        Some(pick)
    }

    pub fn next_annotation_task(&mut self, annotator: &str) -> Result<Option<AnnotationTask>, ServiceError> {
        let eligible: Vec<usize> = self
            .dataset()?
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                let done = self.annotations_of(e.episode_id());
                done.len() < self.quota && done.iter().all(|(a, _)| a != annotator)
            })
            .map(|(i, _)| i)
            .collect();
        let Some(i) = self.next_index(SubmissionKind::Annotation, annotator, &eligible) else {
            return Ok(None);
        };
        let t = &self.dataset()?.entries[i].trajectory;
        Ok(Some(AnnotationTask {
            episode_id: t.episode_id.clone(),
            first_frame_url: frame_url(&t.first),
            last_frame_url: frame_url(&t.last),
            prompt: ANNOTATION_PROMPT.to_owned(),
        }))
    }

    pub fn next_rating_task(&mut self, annotator: &str) -> Result<Option<RatingTask>, ServiceError> {
        let eligible: Vec<usize> = self
            .relabels()?
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| {
                let done = self.effective.rated_by.get(&(e.episode_id().to_owned(), annotator.to_owned()));
                !e.instructions.is_empty()
                    && e.instructions.iter().any(|r| done.is_none_or(|d| !d.contains(&r.instruction_id)))
            })
            .map(|(i, _)| i)
            .collect();
        let Some(i) = self.next_index(SubmissionKind::Rating, annotator, &eligible) else {
            return Ok(None);
        };
        let entry = &self.relabels()?.entries[i];
        let mut candidates: Vec<RatingCandidate> = entry
            .instructions
            .iter()
            .map(|r| {
                let meta = r.relabel.as_ref();
                RatingCandidate {
                    instruction_id: r.instruction_id.clone(),
                    text: r.text.clone(),
                    rank: meta.map_or(0, |m| m.rank),
                    confidence: meta.map_or(0.0, |m| m.prob),
                }
            })
            .collect();
        candidates.sort_by_key(|c| c.rank);
        Ok(Some(RatingTask {
            episode_id: entry.episode_id().to_owned(),
            first_frame_url: frame_url(&entry.trajectory.first),
            last_frame_url: frame_url(&entry.trajectory.last),
            candidates,
        }))
    }

    /// Validates a submission and returns the log record to append, or the
    /// existing sequence number when the key is a replay.
    pub fn prepare_annotation(&self, sub: &AnnotationSubmission) -> Result<Result<LogRecord, u64>, ServiceError> {
        let annotator = checked_annotator(&sub.annotator_id)?;
        if self.dataset()?.get(&sub.episode_id).is_none() {
            return Err(ServiceError::NotFound(format!("episode {}", sub.episode_id)));
        }
        let key = LogRecord::annotation_key(&sub.episode_id, annotator);
        if let Some(&seq) = self.effective.keys.get(&key) {
            return Ok(Err(seq));
        }
        let text = normalize_instruction(&sub.text).map_err(|_| ServiceError::EmptyInstruction)?;
        if self.annotations_of(&sub.episode_id).len() >= self.quota {
            return Err(ServiceError::QuotaReached(sub.episode_id.clone()));
        }
        Ok(Ok(LogRecord {
            seq: self.effective.next_seq,
            kind: SubmissionKind::Annotation,
            key,
            annotator_id: annotator.to_owned(),
            timestamp_ms: crate::log::now_ms(),
            payload: Payload::Annotation(AnnotationPayload { episode_id: sub.episode_id.clone(), text }),
        }))
    }

    pub fn prepare_rating(&self, sub: &RatingSubmission) -> Result<Result<LogRecord, u64>, ServiceError> {
        let annotator = checked_annotator(&sub.annotator_id)?;
        let known = self
            .relabels()?
            .get(&sub.episode_id)
            .is_some_and(|e| e.instructions.iter().any(|r| r.instruction_id == sub.instruction_id));
        if !known {
            return Err(ServiceError::NotFound(format!("instruction {} on episode {}", sub.instruction_id, sub.episode_id)));
        }
        let key = LogRecord::rating_key(&sub.episode_id, &sub.instruction_id, annotator);
        if let Some(&seq) = self.effective.keys.get(&key) {
            return Ok(Err(seq));
        }
        Ok(Ok(LogRecord {
            seq: self.effective.next_seq,
            kind: SubmissionKind::Rating,
            key,
            annotator_id: annotator.to_owned(),
            timestamp_ms: crate::log::now_ms(),
            payload: Payload::Rating(RatingPayload {
                episode_id: sub.episode_id.clone(),
                instruction_id: sub.instruction_id.clone(),
                accurate: sub.accurate,
            }),
        }))
    }

    /// Records an appended submission in the effective state.
    pub fn commit(&mut self, record: &LogRecord) -> Ack {
        let stored = self.apply(record);
        self.effective.next_seq = self.effective.next_seq.max(record.seq + 1);
        Ack { key: record.key.clone(), stored, seq: record.seq }
    }

    /// Annotated episodes with their crowd instructions, as partition A.
    pub fn export_annotations(&self) -> Result<DatasetManifest, ServiceError> {
        let entries = self
            .dataset()?
            .entries
            .iter()
            .filter_map(|e| {
                let done = self.annotations_of(e.episode_id());
                if done.is_empty() {
                    return None;
                }
                let recs = done
                    .iter()
                    .map(|(annotator, text)| {
                        let key = LogRecord::annotation_key(e.episode_id(), annotator);
                        let mut r = InstructionRecord::new(
                            format!("{}-a{}", e.episode_id(), self.effective.keys[&key]),
                            text,
                            InstructionSource::Crowd,
                        );
                        r.episode_id = Some(e.episode_id().to_owned());
                        r.annotator_id = Some(annotator.clone());
                        r
                    })
                    .collect();
                Some(ManifestEntry::new(e.trajectory.clone(), recs))
            })
            .collect();
        Ok(DatasetManifest::new(Partition::A, entries))
    }

    /// Per-rank human accuracy in the evaluation report schema. Each vote
    /// counts once; a candidate is judged accurate when more than half of
    /// its votes say so.
    pub fn accuracy_report(&self) -> Result<EvalReport, ServiceError> {
        if self.effective.ratings.is_empty() {
            return Err(ServiceError::EmptyReport);
        }
        let relabels = self.relabels()?;
        // rank → (votes, accurate votes, confidence sum)
        let mut by_rank: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
        let mut first_accurate: BTreeMap<&str, Option<usize>> = BTreeMap::new();
        for ((episode, instruction), votes) in &self.effective.ratings {
            let Some(meta) = relabels
                .get(episode)
                .and_then(|e| e.instructions.iter().find(|r| &r.instruction_id == instruction))
                .and_then(|r| r.relabel.as_ref())
            else {
                continue;
            };
            let yes = votes.iter().filter(|&&v| v).count();
            let slot = by_rank.entry(meta.rank).or_default();
            slot.0 += votes.len();
            slot.1 += yes;
            slot.2 += meta.prob * votes.len() as f64;
            let best = first_accurate.entry(episode.as_str()).or_default();
            if 2 * yes > votes.len() {
                *best = Some(best.map_or(meta.rank, |b| b.min(meta.rank)));
            }
        }
        let episodes = first_accurate.len();
        let mut rows = Vec::with_capacity(by_rank.len());
        let mut acc_sum = 0.0;
        for (i, (&rank, &(count, correct, conf))) in by_rank.iter().enumerate() {
            let accuracy = correct as f64 / count as f64;
            acc_sum += accuracy;
            let any = first_accurate.values().filter(|b| b.is_some_and(|b| b <= rank)).count();
            rows.push(RankRow {
                rank,
                count,
                correct,
                accuracy,
                mean_confidence: conf / count as f64,
                cumulative_mean: acc_sum / (i + 1) as f64,
                cumulative_any: any as f64 / episodes as f64,
            });
        }
        let labels = rows.iter().map(|r| r.count).sum();
        let mut sizes = BTreeMap::new();
        sizes.insert("rated_episodes".to_owned(), episodes);
        sizes.insert("rated_candidates".to_owned(), self.effective.ratings.len());
        Ok(EvalReport {
            ranks: Some(RankReport { rows, episodes, labels, unparsed: 0 }),
            success: None,
            dataset_sizes: sizes,
        })
    }

    pub fn snapshot(&self) -> StateSnapshot {
        StateSnapshot {
            annotations: self.effective.annotations.clone(),
            ratings: self
                .effective
                .ratings
                .iter()
                .map(|((e, i), v)| (format!("{e}/{i}"), v.clone()))
                .collect(),
        }
    }
}

/// The effective state, for comparing a live store with a replayed one.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateSnapshot {
    pub annotations: BTreeMap<String, Vec<(String, String)>>,
    pub ratings: BTreeMap<String, Vec<bool>>,
}

fn checked_annotator(id: &str) -> Result<&str, ServiceError> {
    let id = id.trim();
    if id.is_empty() {
        return Err(ServiceError::BadRequest("annotator_id is required".into()));
    }
    Ok(id)
}
