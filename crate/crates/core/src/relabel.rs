//! Candidate scoring, Top-k / Min-p selection and Dataset C emission.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{
    dedup_instructions, normalize_instruction, DataError, DatasetManifest, InstructionRecord, InstructionSource,
    ManifestEntry, Partition, RelabelMeta, SelectionMethod,
};
use crate::embed::{EmbedError, EmbeddingStore, Encoder};
use crate::fusion::{fuse, write_checkpoint, FusionCheckpoint, FusionError};
use crate::hash::{fnv1a64, to_hex};
use crate::scalar::{cast_slice, dot, Scalar};

#[derive(Debug, Error, PartialEq)]
pub enum RelabelError {
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("invalid relabel config: {0}")]
    InvalidConfig(String),
    #[error("invalid pool: {0}")]
    InvalidPool(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
}

/// Deduplicated crowd and generated instructions with unit embeddings
/// aligned by `instruction_id`.
#[derive(Clone, Debug, PartialEq)]
pub struct CandidatePool {
    instructions: Vec<InstructionRecord>,
    embeddings: EmbeddingStore,
}

impl CandidatePool {
    /// Normalizes, dedups (crowd preferred) and embeds every source record.
    pub fn build(sources: &[Vec<InstructionRecord>], encoder: &dyn Encoder) -> Result<Self, RelabelError> {
        let mut all = Vec::new();
        for rec in sources.iter().flatten() {
            check_source(rec)?;
            let mut rec = rec.clone();
            rec.text = normalize_instruction(&rec.text)?;
            all.push(rec);
        }
        let instructions = dedup_instructions(&all);
        if instructions.is_empty() {
            return Err(RelabelError::EmptyPool);
        }
        let mut store = EmbeddingStore::empty(encoder.dims());
        for rec in &instructions {
            let v = encoder.encode_text(&rec.text)?.normalized()?;
            store.insert(rec.instruction_id.clone(), v.values())?;
        }
        Ok(Self { instructions, embeddings: store })
    }

    /// Reassembles a pool from records and a store keyed by `instruction_id`.
    pub fn from_parts(instructions: Vec<InstructionRecord>, embeddings: EmbeddingStore) -> Result<Self, RelabelError> {
        if instructions.is_empty() {
            return Err(RelabelError::EmptyPool);
        }
        if instructions.len() != embeddings.len() {
            return Err(RelabelError::InvalidPool(format!(
                "{} instructions but {} embeddings",
                instructions.len(),
                embeddings.len()
            )));
        }
        let mut texts = HashSet::new();
        for rec in &instructions {
            check_source(rec)?;
            if normalize_instruction(&rec.text)? != rec.text || !texts.insert(rec.text.as_str()) {
                return Err(RelabelError::InvalidPool(format!("text {:?} is not normalized and unique", rec.text)));
            }
            embeddings.get(&rec.instruction_id)?;
        }
        Ok(Self { instructions, embeddings })
    }

    pub fn len(&self) -> usize {
        self.instructions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instructions.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.embeddings.dims()
    }

    pub fn instructions(&self) -> &[InstructionRecord] {
        &self.instructions
    }

    pub fn embeddings(&self) -> &EmbeddingStore {
        &self.embeddings
    }

    /// Pool embeddings in instruction order, converted to `T`.
    pub fn matrix<T: Scalar>(&self) -> Vec<Vec<T>> {
        self.instructions
            .iter()
            .map(|r| cast_slice(self.embeddings.get(&r.instruction_id).expect("aligned at construction")))
            .collect()
    }
}

fn check_source(rec: &InstructionRecord) -> Result<(), RelabelError> {
    match rec.source {
        InstructionSource::Crowd | InstructionSource::Generated => Ok(()),
        other => Err(RelabelError::InvalidPool(format!(
            "{} has source {}, expected crowd or generated",
            rec.instruction_id,
            other.as_str()
        ))),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScoredCandidate<T> {
    pub instruction_id: String,
    pub cosine: T,
    pub prob: T,
    pub rank: usize,
}

/// Dot product of `z` with every pool embedding, in pool order.
pub fn score_episode<T: Scalar>(z: &[T], pool: &[Vec<T>]) -> Result<Vec<T>, RelabelError> {
    pool.iter()
        .map(|c| {
            if c.len() != z.len() {
                return Err(EmbedError::DimsMismatch { expected: c.len(), found: z.len() }.into());
            }
            Ok(dot(z, c))
        })
        .collect()
}

/// `exp(c_i/α) / Σ exp(c_j/α)` with the maximum subtracted first.
pub fn softmax_probs<T: Scalar>(cosines: &[T], alpha: T) -> Vec<T> {
    let m = cosines.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = cosines.iter().map(|&c| ((c - m) / alpha).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn by_rank<T: Scalar>(a: &ScoredCandidate<T>, b: &ScoredCandidate<T>) -> Ordering {
    b.cosine
        .partial_cmp(&a.cosine)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.instruction_id.cmp(&b.instruction_id))
}

/// Scores, converts to probabilities and ranks every candidate (rank 1 is
/// the highest cosine; ties go to the smaller instruction id).
pub fn rank_candidates<T: Scalar>(cosines: &[T], ids: &[&str], alpha: T) -> Vec<ScoredCandidate<T>> {
    let probs = softmax_probs(cosines, alpha);
    let mut out: Vec<ScoredCandidate<T>> = cosines
        .iter()
        .zip(probs)
        .zip(ids)
        .map(|((&cosine, prob), id)| ScoredCandidate { instruction_id: (*id).to_owned(), cosine, prob, rank: 0 })
        .collect();
    out.sort_by(by_rank);
    out.iter_mut().enumerate().for_each(|(i, c)| c.rank = i + 1);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopK<T> {
    pub selected: Vec<ScoredCandidate<T>>,
    /// Set when `k` exceeded the pool size.
    pub truncated: bool,
}

pub fn select_top_k<T: Scalar>(scored: &[ScoredCandidate<T>], k: usize) -> TopK<T> {
    let mut sorted = scored.to_vec();
    sorted.sort_by(by_rank);
    let truncated = k > sorted.len();
    sorted.truncate(k);
    TopK { selected: sorted, truncated }
}

/// Every candidate with `prob >= p`, highest probability first.
pub fn select_min_p<T: Scalar>(scored: &[ScoredCandidate<T>], p: T) -> Vec<ScoredCandidate<T>> {
    let mut out: Vec<ScoredCandidate<T>> = scored.iter().filter(|c| c.prob >= p).cloned().collect();
    out.sort_by(|a, b| {
        b.prob
            .partial_cmp(&a.prob)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.instruction_id.cmp(&b.instruction_id))
    });
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "snake_case")]
pub enum Selection {
    TopK { k: usize },
    MinP { p: f64 },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum TemperatureSource {
    #[default]
    Checkpoint,
    Override { alpha: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelabelConfig {
    pub selection: Selection,
    #[serde(default)]
    pub temperature: TemperatureSource,
}

impl RelabelConfig {
    pub fn top_k(k: usize) -> Self {
        Self { selection: Selection::TopK { k }, temperature: TemperatureSource::Checkpoint }
    }

    pub fn min_p(p: f64) -> Self {
        Self { selection: Selection::MinP { p }, temperature: TemperatureSource::Checkpoint }
    }

    pub fn validate(&self) -> Result<(), RelabelError> {
        match self.selection {
            Selection::TopK { k } if k == 0 => return Err(RelabelError::InvalidConfig("k must be at least 1".into())),
            Selection::MinP { p } if !(p > 0.0 && p <= 1.0) => {
                return Err(RelabelError::InvalidConfig(format!("p = {p} is outside (0, 1]")))
            }
            _ => {}
        }
        if let TemperatureSource::Override { alpha } = self.temperature {
            if !(alpha > 0.0 && alpha.is_finite()) {
                return Err(RelabelError::InvalidConfig(format!("temperature {alpha} must be positive")));
            }
        }
        Ok(())
    }

    fn method(&self) -> SelectionMethod {
        match self.selection {
            Selection::TopK { .. } => SelectionMethod::TopK,
            Selection::MinP { .. } => SelectionMethod::MinP,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelabelFailure {
    pub episode_id: String,
    pub reason: String,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RelabelStats {
    pub episodes_in: usize,
    /// Episode-instruction pairs emitted.
    pub total_rows: usize,
    /// Episodes with at least one emitted row.
    pub episodes_relabeled: usize,
    /// Episodes dropped because min-p selected nothing.
    pub episodes_omitted: usize,
    pub unique_instructions: usize,
    pub crowd_rows: usize,
    pub generated_rows: usize,
    pub crowd_share: f64,
    pub generated_share: f64,
    pub truncated_episodes: usize,
    /// Rows per episode → number of episodes.
    pub rows_per_episode: BTreeMap<usize, usize>,
    pub failures: Vec<RelabelFailure>,
    pub checkpoint_hash: String,
    pub temperature: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RelabelOutput {
    pub dataset: DatasetManifest,
    pub stats: RelabelStats,
}

enum EpisodeResult {
    Rows(ManifestEntry, bool),
    Empty,
    Failed(RelabelFailure),
}

pub fn checkpoint_hash<T: Scalar>(ckpt: &FusionCheckpoint<T>) -> String {
    to_hex(fnv1a64(&write_checkpoint(ckpt)))
}

/// Fuses, scores and selects candidates for every episode of `dataset_b`.
/// `frames` holds unit frame embeddings keyed by hex content hash. Episodes
/// are processed in parallel and emitted in input order.
pub fn relabel_dataset<T: Scalar>(
    dataset_b: &DatasetManifest,
    frames: &EmbeddingStore,
    pool: &CandidatePool,
    checkpoint: &FusionCheckpoint<T>,
    config: &RelabelConfig,
) -> Result<RelabelOutput, RelabelError> {
    config.validate()?;
    if pool.is_empty() {
        return Err(RelabelError::EmptyPool);
    }
    if pool.dims() != checkpoint.params.dims {
        return Err(EmbedError::DimsMismatch { expected: checkpoint.params.dims, found: pool.dims() }.into());
    }
    let alpha = match config.temperature {
        TemperatureSource::Checkpoint => checkpoint.params.temperature(),
        TemperatureSource::Override { alpha } => T::of(alpha),
    };
    let ckpt_hash = checkpoint_hash(checkpoint);
    let matrix = pool.matrix::<T>();
    let ids: Vec<&str> = pool.instructions.iter().map(|r| r.instruction_id.as_str()).collect();
    let sources: std::collections::HashMap<&str, &InstructionRecord> =
        pool.instructions.iter().map(|r| (r.instruction_id.as_str(), r)).collect();

    let results: Vec<EpisodeResult> = dataset_b
        .entries
        .par_iter()
        .map(|entry| {
            let embedded = (|| -> Result<_, RelabelError> {
                let first: Vec<T> = cast_slice(frames.get(&entry.trajectory.first.hash_hex())?);
                let last: Vec<T> = cast_slice(frames.get(&entry.trajectory.last.hash_hex())?);
                Ok(fuse(&first, &last, &checkpoint.params)?.into_values())
            })();
            let z = match embedded {
                Ok(z) => z,
                Err(e) => {
                    return EpisodeResult::Failed(RelabelFailure {
                        episode_id: entry.episode_id().to_owned(),
                        reason: e.to_string(),
                    })
                }
            };
            let cos = score_episode(&z, &matrix).expect("dims checked against the checkpoint");
            let ranked = rank_candidates(&cos, &ids, alpha);
            let (chosen, truncated) = match config.selection {
                Selection::TopK { k } => {
                    let t = select_top_k(&ranked, k);
                    (t.selected, t.truncated)
                }
                Selection::MinP { p } => (select_min_p(&ranked, T::of(p)), false),
            };
            if chosen.is_empty() {
                return EpisodeResult::Empty;
            }
            let instructions = chosen
                .iter()
                .map(|c| {
                    let src = sources[c.instruction_id.as_str()];
                    let mut rec = InstructionRecord::new(&c.instruction_id, &src.text, InstructionSource::Relabeled);
                    rec.episode_id = Some(entry.episode_id().to_owned());
                    rec.relabel = Some(RelabelMeta {
                        cosine: c.cosine.as_f64(),
                        prob: c.prob.as_f64(),
                        rank: c.rank,
                        method: config.method(),
                        k: match config.selection {
                            Selection::TopK { k } => Some(k),
                            Selection::MinP { .. } => None,
                        },
                        p: match config.selection {
                            Selection::MinP { p } => Some(p),
                            Selection::TopK { .. } => None,
                        },
                        checkpoint_hash: ckpt_hash.clone(),
                        pool_source: src.source,
                    });
                    rec
                })
                .collect();
            let out = ManifestEntry { trajectory: entry.trajectory.clone(), instructions, extra: Default::default() };
            EpisodeResult::Rows(out, truncated)
        })
        .collect();

    let mut stats = RelabelStats {
        episodes_in: dataset_b.len(),
        checkpoint_hash: ckpt_hash,
        temperature: alpha.as_f64(),
        ..Default::default()
    };
    let mut entries = Vec::new();
    let mut unique = HashSet::new();
    for r in results {
        match r {
            EpisodeResult::Rows(entry, truncated) => {
                stats.total_rows += entry.instructions.len();
                stats.episodes_relabeled += 1;
                stats.truncated_episodes += usize::from(truncated);
                *stats.rows_per_episode.entry(entry.instructions.len()).or_default() += 1;
                for rec in &entry.instructions {
                    unique.insert(rec.instruction_id.clone());
                    match rec.relabel.as_ref().map(|m| m.pool_source) {
                        Some(InstructionSource::Crowd) => stats.crowd_rows += 1,
                        _ => stats.generated_rows += 1,
                    }
                }
                entries.push(entry);
            }
            EpisodeResult::Empty => stats.episodes_omitted += 1,
            EpisodeResult::Failed(f) => stats.failures.push(f),
        }
    }
    stats.unique_instructions = unique.len();
    if stats.total_rows > 0 {
        stats.crowd_share = stats.crowd_rows as f64 / stats.total_rows as f64;
        stats.generated_share = stats.generated_rows as f64 / stats.total_rows as f64;
    }
    Ok(RelabelOutput { dataset: DatasetManifest::new(Partition::C, entries), stats })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cand(id: &str, cosine: f64, prob: f64) -> ScoredCandidate<f64> {
        ScoredCandidate { instruction_id: id.into(), cosine, prob, rank: 0 }
    }

    #[test]
    fn score_examples() {
        let pool = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        assert_eq!(score_episode(&[1.0, 0.0], &pool).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(score_episode(&[1.0, 0.0, 0.0], &pool), Err(RelabelError::Embed(EmbedError::DimsMismatch { .. }))));
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_probs(&[0.3f64; 5], 0.07);
        assert!(p.iter().all(|&x| x == 0.2));
        let p = softmax_probs(&[0.9f64, 0.5, 0.1], 0.07);
        let e: Vec<f64> = [0.9f64, 0.5, 0.1].iter().map(|c| (c / 0.07).exp()).collect();
        let s: f64 = e.iter().sum();
        for (a, b) in p.iter().zip(&e) {
            assert!((a - b / s).abs() < 1e-12);
        }
        assert!((p[0] - 0.9967).abs() < 1e-4 && (p[1] - 0.0033).abs() < 1e-4 && (p[2] - 1.1e-5).abs() < 1e-6);
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn top_k_examples() {
        let s = [cand("c", 0.1, 0.0), cand("a", 0.9, 0.0), cand("b", 0.8, 0.0)];
        let t = select_top_k(&s, 2);
        assert_eq!(t.selected.iter().map(|c| c.instruction_id.as_str()).collect::<Vec<_>>(), ["a", "b"]);
        assert!(!t.truncated);
        let tie = [cand("b", 0.5, 0.0), cand("a", 0.5, 0.0)];
        assert_eq!(select_top_k(&tie, 1).selected[0].instruction_id, "a");
        let t = select_top_k(&s, 10);
        assert_eq!(t.selected.len(), 3);
        assert!(t.truncated);
    }

    #[test]
    fn min_p_examples() {
        let cos = [0.4f64; 5];
        let ids = ["a", "b", "c", "d", "e"];
        let ranked = rank_candidates(&cos, &ids, 0.07);
        assert_eq!(select_min_p(&ranked, 0.2).len(), 5);
        assert!(select_min_p(&ranked, 0.3).is_empty());
        let ranked = rank_candidates(&[0.9, 0.5, 0.1], &["x", "y", "z"], 0.07);
        let sel = select_min_p(&ranked, 0.2);
        assert_eq!(sel.len(), 1);
        assert_eq!(sel[0].instruction_id, "x");
    }

    #[test]
    fn ranks_form_a_permutation() {
        let ranked = rank_candidates(&[0.2f64, 0.9, 0.2, -0.1], &["d", "c", "b", "a"], 0.5);
        let order: Vec<(&str, usize)> = ranked.iter().map(|c| (c.instruction_id.as_str(), c.rank)).collect();
        assert_eq!(order, [("c", 1), ("b", 2), ("d", 3), ("a", 4)]);
    }

    #[test]
    fn config_validation() {
        assert!(RelabelConfig::top_k(0).validate().is_err());
        assert!(RelabelConfig::min_p(0.0).validate().is_err());
        assert!(RelabelConfig::min_p(1.0).validate().is_ok());
        let cfg = RelabelConfig { selection: Selection::TopK { k: 1 }, temperature: TemperatureSource::Override { alpha: -1.0 } };
        assert!(cfg.validate().is_err());
    }
}
