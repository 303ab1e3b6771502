//! Minibatch Adam training with held-out retrieval checkpoint selection.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{loss_and_gradients, FusionError, FusionExample, FusionParams, DEFAULT_HIDDEN};
use crate::data::{DatasetManifest, InstructionSource};
use crate::embed::Encoder;
use crate::scalar::{cast_slice, dot, Scalar};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub learning_rate: f64,
    pub holdout_fraction: f64,
    pub eval_every: usize,
    pub seed: u64,
    pub hidden: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_steps: 2_000,
            learning_rate: 1e-3,
            holdout_fraction: 0.10,
            eval_every: 100,
            seed: 0,
            hidden: DEFAULT_HIDDEN,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), FusionError> {
        if self.batch_size < 2 {
            return Err(FusionError::InvalidInput("batch size must be at least 2".into()));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return Err(FusionError::InvalidInput("holdout fraction must be in (0, 1)".into()));
        }
        if self.eval_every == 0 || self.hidden == 0 {
            return Err(FusionError::InvalidInput("eval_every and hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionCheckpoint<T> {
    pub params: FusionParams<T>,
    pub step: u64,
    pub holdout_top1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub step: u64,
    pub top1: f64,
    pub top5: f64,
    pub train_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome<T> {
    pub checkpoint: FusionCheckpoint<T>,
    pub evaluations: Vec<Evaluation>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalAccuracy {
    pub top1: f64,
    pub top5: f64,
}

/// An evaluation pair: frame embeddings and the index of the true text in
/// the candidate list.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalPair<T> {
    pub first: Vec<T>,
    pub last: Vec<T>,
    pub truth: String,
}

#[derive(Clone, Debug)]
struct Episode<T> {
    first: Vec<T>,
    last: Vec<T>,
    texts: Vec<usize>,
}

/// Unit-normalized embeddings for every annotated episode plus the distinct
/// instruction texts, in first-occurrence order.
#[derive(Clone, Debug)]
pub struct FusionTrainingSet<T> {
    episodes: Vec<Episode<T>>,
    texts: Vec<(String, Vec<T>)>,
}

impl<T: Scalar> FusionTrainingSet<T> {
    /// Embeds every frame and crowd instruction of `dataset`.
    pub fn from_manifest(dataset: &DatasetManifest, encoder: &dyn Encoder) -> Result<Self, FusionError> {
        let mut set = Self { episodes: Vec::new(), texts: Vec::new() };
        let mut text_index: HashMap<String, usize> = HashMap::new();
        for entry in &dataset.entries {
            let first = encoder.encode_image(&entry.trajectory.first)?.normalized()?;
            let last = encoder.encode_image(&entry.trajectory.last)?.normalized()?;
            let mut texts = Vec::new();
            for ins in entry.instructions.iter().filter(|i| i.source == InstructionSource::Crowd) {
                let idx = match text_index.get(&ins.text) {
                    Some(&i) => i,
                    None => {
                        let z = encoder.encode_text(&ins.text)?.normalized()?;
                        set.texts.push((ins.text.clone(), cast_slice(z.values())));
                        text_index.insert(ins.text.clone(), set.texts.len() - 1);
                        set.texts.len() - 1
                    }
                };
                if !texts.contains(&idx) {
                    texts.push(idx);
                }
            }
            if texts.is_empty() {
                return Err(FusionError::InvalidInput(format!(
                    "episode {} has no crowd instruction",
                    entry.episode_id()
                )));
            }
            set.episodes.push(Episode {
                first: cast_slice(first.values()),
                last: cast_slice(last.values()),
                texts,
            });
        }
        Ok(set)
    }

    pub fn episodes(&self) -> usize {
        self.episodes.len()
    }

    pub fn candidate_texts(&self) -> &[(String, Vec<T>)] {
        &self.texts
    }
}

/// 1-based rank of `truth` among `scores`; ties resolve by candidate order.
pub fn rank_of_truth<T: Scalar>(scores: &[T], truth: usize) -> usize {
    let t = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| s > t || (s == t && i < truth))
        .count()
}

/// Top-1/top-5 retrieval over precomputed unit episode embeddings.
pub fn retrieval_accuracy_from_embeddings<T: Scalar>(
    episodes: &[(Vec<T>, String)],
    candidates: &[(String, Vec<T>)],
) -> Result<RetrievalAccuracy, FusionError> {
    if episodes.is_empty() {
        return Ok(RetrievalAccuracy::default());
    }
    let index: HashMap<&str, usize> = candidates
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (t.as_str(), i))
        .collect();
    let (mut top1, mut top5) = (0usize, 0usize);
    for (z, truth) in episodes {
        let &ti = index
            .get(truth.as_str())
            .ok_or_else(|| FusionError::MissingTruth(truth.clone()))?;
        let scores: Vec<T> = candidates.iter().map(|(_, c)| dot(z, c)).collect();
        let rank = rank_of_truth(&scores, ti);
        top1 += usize::from(rank == 1);
        top5 += usize::from(rank <= 5);
    }
    let n = episodes.len() as f64;
    Ok(RetrievalAccuracy { top1: top1 as f64 / n, top5: top5 as f64 / n })
}

/// Fuses each pair with `params` and scores retrieval of its true text.
pub fn retrieval_accuracy<T: Scalar>(
    params: &FusionParams<T>,
    pairs: &[EvalPair<T>],
    candidates: &[(String, Vec<T>)],
) -> Result<RetrievalAccuracy, FusionError> {
    let fused = pairs
        .iter()
        .map(|p| Ok((params.forward(&p.first, &p.last)?.z, p.truth.clone())))
        .collect::<Result<Vec<_>, FusionError>>()?;
    retrieval_accuracy_from_embeddings(&fused, candidates)
}

pub(crate) struct Adam<T> {
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
    lr: T,
}

impl<T: Scalar> Adam<T> {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub(crate) fn new(len: usize, lr: f64) -> Self {
        Self { m: vec![T::zero(); len], v: vec![T::zero(); len], t: 0, lr: T::of(lr) }
    }

    pub(crate) fn step(&mut self, params: &mut [T], grads: &[T]) {
        self.t += 1;
        let (b1, b2) = (T::of(Self::BETA1), T::of(Self::BETA2));
        let c1 = T::one() - b1.powi(self.t);
        let c2 = T::one() - b2.powi(self.t);
        let eps = T::of(Self::EPS);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = b1 * self.m[i] + (T::one() - b1) * g;
            self.v[i] = b2 * self.v[i] + (T::one() - b2) * g * g;
            let mhat = self.m[i] / c1;
            let vhat = self.v[i] / c2;
            params[i] = params[i] - self.lr * mhat / (vhat.sqrt() + eps);
        }
    }
}

/// Trains on a prepared set. Evaluates at step 0, every `eval_every`
/// updates and after the last update; keeps the first best checkpoint.
pub fn train_on_set<T: Scalar>(
    set: &FusionTrainingSet<T>,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, FusionError> {
    config.validate()?;
    let dims = set
        .texts
        .first()
        .map(|(_, v)| v.len())
        .ok_or_else(|| FusionError::InvalidInput("empty training set".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..set.episodes.len()).collect();
    order.shuffle(&mut rng);
    let n_hold = ((config.holdout_fraction * order.len() as f64).floor() as usize).max(1);
    let (hold, train) = order.split_at(n_hold.min(order.len()));
    if train.len() < config.batch_size {
        return Err(FusionError::InsufficientData { available: train.len(), batch_size: config.batch_size });
    }
    let hold_pairs: Vec<EvalPair<T>> = hold
        .iter()
        .flat_map(|&e| {
            let ep = &set.episodes[e];
            ep.texts.iter().map(move |&t| EvalPair {
                first: ep.first.clone(),
                last: ep.last.clone(),
                truth: set.texts[t].0.clone(),
            })
        })
        .collect();

    let mut params = FusionParams::<T>::init(dims, config.hidden, &mut rng);
    let mut flat = params.to_flat();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut evaluations = Vec::new();
    let mut best: Option<FusionCheckpoint<T>> = None;
    let mut last_loss = None;

    for step in 0..=config.max_steps {
        if step % config.eval_every == 0 || step == config.max_steps {
            let acc = retrieval_accuracy(&params, &hold_pairs, &set.texts)?;
            evaluations.push(Evaluation { step: step as u64, top1: acc.top1, top5: acc.top5, train_loss: last_loss });
            if best.as_ref().is_none_or(|b| acc.top1 > b.holdout_top1) {
                best = Some(FusionCheckpoint { params: params.clone(), step: step as u64, holdout_top1: acc.top1 });
            }
        }
        if step == config.max_steps {
            break;
        }
        // One annotation per episode per batch, so no two pairs share an episode.
        let batch: Vec<FusionExample<T>> = rand::seq::index::sample(&mut rng, train.len(), config.batch_size)
            .into_iter()
            .map(|i| {
                let ep = &set.episodes[train[i]];
                let t = ep.texts[rng.random_range(0..ep.texts.len())];
                FusionExample { first: ep.first.clone(), last: ep.last.clone(), text: set.texts[t].1.clone() }
            })
            .collect();
        let (loss, grads) = loss_and_gradients(&params, &batch)?;
        last_loss = Some(loss.as_f64());
        adam.step(&mut flat, &grads.to_flat());
        params = FusionParams::from_flat(dims, config.hidden, &flat);
        params.clamp_scale();
        *flat.last_mut().expect("log scale present") = params.log_scale;
        if !params.is_finite() {
            return Err(FusionError::NumericalOverflow);
        }
    }
    Ok(TrainOutcome { checkpoint: best.expect("step 0 is always evaluated"), evaluations })
}

/// Embeds `dataset_a` with `encoder` and trains the fusion head.
pub fn train_fusion<T: Scalar>(
    dataset_a: &DatasetManifest,
    encoder: &dyn Encoder,
    config: &TrainConfig,
) -> Result<TrainOutcome<T>, FusionError> {
    let set = FusionTrainingSet::from_manifest(dataset_a, encoder)?;
    train_on_set(&set, config)
}
