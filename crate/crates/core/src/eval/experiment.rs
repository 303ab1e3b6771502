//! End-to-end runs on generated worlds: fine-tuning on a planted world and
//! the downstream policy comparison.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::policy::{evaluate_policy, examples_from_manifests, train_proxy_policy, ProxyConfig, SuccessReport};
use super::rank::{compute_rank_accuracy, RankReport};
use super::EvalError;
use crate::augment::{add_gaussian_noise, word_synonym_augment, SynonymMap};
use crate::data::{split_dataset, DatasetManifest, InstructionRecord, InstructionSource, ManifestEntry, Partition};
use crate::embed::{embed_frames, SyntheticEncoderConfig};
use crate::fusion::{train_on_set, FusionTrainingSet, TrainConfig};
use crate::relabel::{relabel_dataset, CandidatePool, RelabelConfig, RelabelStats};
use crate::world::{generate_world, World, WorldConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedConfig {
    pub episodes: usize,
    pub tasks: usize,
    pub encoder: SyntheticEncoderConfig,
    pub train: TrainConfig,
    pub top_k: usize,
}

impl Default for PlantedConfig {
    fn default() -> Self {
        Self {
            episodes: 500,
            tasks: 100,
            encoder: SyntheticEncoderConfig { dims: 128, attribute_basis_seed: 0, noise_scale: 0.1 },
            train: TrainConfig { max_steps: 1_000, eval_every: 50, ..Default::default() },
            top_k: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedOutcome {
    pub seed: u64,
    pub untrained_top1: f64,
    pub trained_top1: f64,
    pub best_step: u64,
    pub ranks: RankReport,
}

fn world_encoder(world: &World, base: &SyntheticEncoderConfig, seed: u64) -> crate::embed::SyntheticEncoder {
    world.encoder(SyntheticEncoderConfig { attribute_basis_seed: base.attribute_basis_seed ^ seed, ..base.clone() })
}

/// Trains the fusion head on a world of repeated tasks, each with one fully
/// specified instruction, then relabels every episode with Top-k over the
/// task texts.
pub fn run_planted(config: &PlantedConfig, seed: u64) -> Result<PlantedOutcome, EvalError> {
    let world = generate_world(&WorldConfig {
        episode_count: config.episodes,
        seed,
        distinct_tasks: Some(config.tasks),
        eval_per_category: 0,
        ..Default::default()
    })?;
    let encoder = world_encoder(&world, &config.encoder, seed);
    let annotated = world.annotated_manifest();
    let set = FusionTrainingSet::<f64>::from_manifest(&annotated, &encoder)?;
    let outcome = train_on_set(&set, &TrainConfig { seed, ..config.train.clone() })?;

    let crowd: Vec<InstructionRecord> = annotated.entries.iter().flat_map(|e| e.instructions.clone()).collect();
    let pool = CandidatePool::build(&[crowd], &encoder)?;
    let mut structured = world.structured_manifest();
    structured.partition = Some(Partition::B);
    let frames = embed_frames(
        structured.entries.iter().flat_map(|e| [&e.trajectory.first, &e.trajectory.last]),
        &encoder,
    )?;
    let relabeled = relabel_dataset(&structured, &frames, &pool, &outcome.checkpoint, &RelabelConfig::top_k(config.top_k))?;
    let ranks = compute_rank_accuracy(&relabeled.dataset, &world.episodes)?;
    Ok(PlantedOutcome {
        seed,
        untrained_top1: outcome.evaluations[0].top1,
        trained_top1: outcome.checkpoint.holdout_top1,
        best_step: outcome.checkpoint.step,
        ranks,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DownstreamConfig {
    pub world: WorldConfig,
    pub annotated_fraction: f64,
    pub encoder: SyntheticEncoderConfig,
    pub train: TrainConfig,
    pub min_p: f64,
    pub proxy: ProxyConfig,
    pub gaussian_sigma: f64,
    pub gaussian_copies: usize,
    pub word_variants: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        Self {
            world: WorldConfig { episode_count: 10_000, eval_per_category: 60, ..Default::default() },
            annotated_fraction: 0.035,
            encoder: SyntheticEncoderConfig { dims: 128, attribute_basis_seed: 0, noise_scale: 0.1 },
            train: TrainConfig { batch_size: 32, max_steps: 5_000, learning_rate: 3e-3, eval_every: 5_000, ..Default::default() },
            min_p: 0.2,
            proxy: ProxyConfig { epochs: 3, learning_rate: 3e-3, ..Default::default() },
            gaussian_sigma: 0.05,
            gaussian_copies: 1,
            word_variants: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmResult {
    pub name: String,
    pub train_examples: usize,
    pub report: SuccessReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DownstreamOutcome {
    pub seed: u64,
    pub fusion_top1: f64,
    pub relabel: RelabelStats,
    /// Relabeled rows that match their episode's ground truth.
    pub relabel_accuracy: f64,
    pub eval_items: usize,
    pub arms: Vec<ArmResult>,
}

impl DownstreamOutcome {
    pub fn arm(&self, name: &str) -> Option<&ArmResult> {
        self.arms.iter().find(|a| a.name == name)
    }
}

pub const ARM_BASE: &str = "A+B";
pub const ARM_DIAL: &str = "A+B+C";
pub const ARM_GAUSSIAN: &str = "A+B+gaussian";
pub const ARM_WORD: &str = "A+B+word";

/// Splits a world into annotated A and structured B, fine-tunes on A,
/// relabels B with Min-p and trains one proxy policy per data recipe.
pub fn run_downstream(config: &DownstreamConfig, seed: u64) -> Result<DownstreamOutcome, EvalError> {
    let world = generate_world(&WorldConfig { seed, ..config.world.clone() })?;
    let encoder = world_encoder(&world, &config.encoder, seed);
    let (dataset_a, rest) = split_dataset(&world.annotated_manifest(), config.annotated_fraction, seed)?;
    let structured = world.structured_manifest();
    let b_entries: Vec<ManifestEntry> = rest
        .entries
        .iter()
        .map(|e| structured.get(e.episode_id()).expect("same episodes").clone())
        .collect();
    let dataset_b = DatasetManifest::new(Partition::B, b_entries);

    let set = FusionTrainingSet::<f64>::from_manifest(&dataset_a, &encoder)?;
    let fusion = train_on_set(&set, &TrainConfig { seed, ..config.train.clone() })?;
    let crowd: Vec<InstructionRecord> = dataset_a.entries.iter().flat_map(|e| e.instructions.clone()).collect();
    let pool = CandidatePool::build(&[crowd, world.proposal_records()], &encoder)?;
    let frames = embed_frames(
        dataset_b.entries.iter().flat_map(|e| [&e.trajectory.first, &e.trajectory.last]),
        &encoder,
    )?;
    let relabeled = relabel_dataset(&dataset_b, &frames, &pool, &fusion.checkpoint, &RelabelConfig::min_p(config.min_p))?;
    let dataset_c = relabeled.dataset;
    let ranks = compute_rank_accuracy(&dataset_c, &world.episodes)?;
    let correct: usize = ranks.rows.iter().map(|r| r.correct).sum();

    // Word-synonym variants of every A and B instruction.
    let map = SynonymMap::builtin();
    let word_entries: Vec<ManifestEntry> = dataset_a
        .entries
        .iter()
        .chain(&dataset_b.entries)
        .map(|e| {
            let recs = e
                .instructions
                .iter()
                .enumerate()
                .flat_map(|(i, r)| {
                    word_synonym_augment(&r.text, &map, seed ^ crate::hash::fnv1a64(r.instruction_id.as_bytes()), config.word_variants)
                        .into_iter()
                        .enumerate()
                        .map(move |(v, text)| (i, v, text))
                })
                .map(|(i, v, text)| {
                    let mut rec = InstructionRecord::new(format!("{}-w{i}-{v}", e.episode_id()), text, InstructionSource::Generated);
                    rec.episode_id = Some(e.episode_id().to_owned());
                    rec
                })
                .collect();
            ManifestEntry::new(e.trajectory.clone(), recs)
        })
        .collect();
    let dataset_word = DatasetManifest { partition: None, entries: word_entries };

    let all_texts: Vec<&str> = [&dataset_a, &dataset_b, &dataset_c, &dataset_word]
        .iter()
        .flat_map(|d| d.texts())
        .collect();
    let eval = world.eval.filter_disjoint(all_texts.iter().copied());

    let noise = config.proxy.scene_noise;
    let examples = |sets: &[&DatasetManifest]| examples_from_manifests(sets, &world.episodes, &encoder, noise, seed);
    let base = examples(&[&dataset_a, &dataset_b])?;
    let mut gaussian = base.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6761_7573);
    for ex in &base {
        for _ in 0..config.gaussian_copies {
            let mut copy = ex.clone();
            copy.instruction = add_gaussian_noise(&ex.instruction, config.gaussian_sigma, &mut rng);
            gaussian.push(copy);
        }
    }
    let arms = vec![
        (ARM_BASE, base.clone()),
        (ARM_DIAL, examples(&[&dataset_a, &dataset_b, &dataset_c])?),
        (ARM_GAUSSIAN, gaussian),
        (ARM_WORD, examples(&[&dataset_a, &dataset_b, &dataset_word])?),
    ];
    let proxy = ProxyConfig { seed, ..config.proxy.clone() };
    let mut results = Vec::with_capacity(arms.len());
    for (name, ex) in arms {
        let policy = train_proxy_policy(&ex, &proxy)?;
        let report = evaluate_policy(&policy, &eval, &encoder, noise)?;
        results.push(ArmResult { name: name.to_owned(), train_examples: ex.len(), report });
    }
    Ok(DownstreamOutcome {
        seed,
        fusion_top1: fusion.checkpoint.holdout_top1,
        relabel_accuracy: if ranks.labels == 0 { 0.0 } else { correct as f64 / ranks.labels as f64 },
        relabel: relabeled.stats,
        eval_items: eval.items.len(),
        arms: results,
    })
}
