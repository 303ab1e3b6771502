use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::DatasetManifest;
use crate::world::{MatchCounter, SyntheticEpisode};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankRow {
    pub rank: usize,
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub mean_confidence: f64,
    /// Mean of per-rank accuracy over ranks 1..=rank.
    pub cumulative_mean: f64,
    /// Share of relabeled episodes with a correct label at some rank ≤ rank.
    pub cumulative_any: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RankReport {
    pub rows: Vec<RankRow>,
    pub episodes: usize,
    pub labels: usize,
    pub unparsed: usize,
}

impl RankReport {
    pub fn row(&self, rank: usize) -> Option<&RankRow> {
        self.rows.get(rank.checked_sub(1)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("rank,count,correct,accuracy,mean_confidence,cumulative_mean,cumulative_any\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.rank, r.count, r.correct, r.accuracy, r.mean_confidence, r.cumulative_mean, r.cumulative_any
            ));
        }
        out
    }
}

/// Judges every relabeled pair against the episode's ground truth and
/// aggregates by rank.
pub fn compute_rank_accuracy(relabels: &DatasetManifest, episodes: &[SyntheticEpisode]) -> Result<RankReport, EvalError> {
    let index: HashMap<&str, &SyntheticEpisode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let mut counter = MatchCounter::default();
    // rank → (count, correct, confidence sum)
    let mut by_rank: BTreeMap<usize, (usize, usize, f64)> = BTreeMap::new();
    // First rank holding a correct label, per relabeled episode.
    let mut first_correct: Vec<Option<usize>> = Vec::new();
    for entry in &relabels.entries {
        if entry.instructions.is_empty() {
            continue;
        }
        let ep = index
            .get(entry.episode_id())
            .ok_or_else(|| EvalError::UnknownEpisode(entry.episode_id().to_owned()))?;
        let mut ranks = Vec::with_capacity(entry.instructions.len());
        let mut best: Option<usize> = None;
        for rec in &entry.instructions {
            let meta = rec.relabel.as_ref().ok_or_else(|| {
                EvalError::MalformedRelabels(format!("{} lacks score metadata", rec.instruction_id))
            })?;
            ranks.push(meta.rank);
            let ok = counter.check(ep, &rec.text);
            let slot = by_rank.entry(meta.rank).or_default();
            slot.0 += 1;
            slot.1 += usize::from(ok);
            slot.2 += meta.prob;
            if ok {
                best = Some(best.map_or(meta.rank, |b| b.min(meta.rank)));
            }
        }
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(i, &r)| r != i + 1) {
            return Err(EvalError::MalformedRelabels(format!(
                "episode {} has ranks {ranks:?}, expected 1..={}",
                entry.episode_id(),
                ranks.len()
            )));
        }
        first_correct.push(best);
    }
    let episodes_n = first_correct.len();
    let mut rows = Vec::with_capacity(by_rank.len());
    let mut acc_sum = 0.0;
    for (i, (&rank, &(count, correct, conf))) in by_rank.iter().enumerate() {
        let accuracy = correct as f64 / count as f64;
        acc_sum += accuracy;
        let any = first_correct.iter().filter(|b| b.is_some_and(|b| b <= rank)).count();
        rows.push(RankRow {
            rank,
            count,
            correct,
            accuracy,
            mean_confidence: conf / count as f64,
            cumulative_mean: acc_sum / (i + 1) as f64,
            cumulative_any: any as f64 / episodes_n as f64,
        });
    }
    Ok(RankReport { rows, episodes: episodes_n, labels: counter.checked, unparsed: counter.unparsed })
}
