//! Proxy language-conditioned policy.
//!
//! Each action class is a (skill, slot) pair. Its logit is
//! `a_skill·ẑ + ẑᵀ B ĝ_slot + c_slot·ẑ` where `ẑ = [z; 1]` is the unit
//! instruction embedding and `ĝ_slot = [g; 1]` the scene features of that
//! slot. All three terms are linear in the weights, so training is a convex
//! softmax regression on a fixed feature map.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::data::DatasetManifest;
use crate::embed::Encoder;
use crate::fusion::Adam;
use crate::hash::fnv1a64;
use crate::world::{
    object, parse_instruction, ActionClass, Category, Color, EvalCategory, EvalInstructionSet, Kind, ObjId, Scene,
    Skill, SyntheticEpisode, OBJECTS,
};

/// Object, kind, colour and category one-hots per slot.
pub const SCENE_DIM: usize = OBJECTS.len() + Kind::ALL.len() + Color::ALL.len() + Category::ALL.len();

pub fn slot_features(obj: ObjId) -> [f64; SCENE_DIM] {
    let o = object(obj);
    let mut f = [0.0; SCENE_DIM];
    f[obj] = 1.0;
    let mut base = OBJECTS.len();
    f[base + Kind::ALL.iter().position(|&k| k == o.kind).expect("listed")] = 1.0;
    base += Kind::ALL.len();
    f[base + Color::ALL.iter().position(|&c| c == o.color).expect("listed")] = 1.0;
    base += Color::ALL.len();
    if let Some(c) = o.category {
        f[base + Category::ALL.iter().position(|&x| x == c).expect("listed")] = 1.0;
    }
    f
}

/// Noisy per-slot features of a scene; the noise is a function of `seed`.
pub fn scene_features(scene: &Scene, sigma: f64, seed: u64) -> [[f64; SCENE_DIM]; 3] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = [[0.0; SCENE_DIM]; 3];
    for (i, row) in out.iter_mut().enumerate() {
        *row = slot_features(scene.objects[i]);
        if sigma > 0.0 {
            for x in row.iter_mut() {
                let e: f64 = StandardNormal.sample(&mut rng);
                *x += sigma * e;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct PolicyExample {
    pub instruction: Vec<f64>,
    pub scene: [[f64; SCENE_DIM]; 3],
    pub label: ActionClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProxyConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2: f64,
    pub scene_noise: f64,
    pub seed: u64,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        Self { epochs: 15, batch_size: 32, learning_rate: 0.01, l2: 1e-4, scene_noise: 0.1, seed: 0 }
    }
}

const SKILLS: usize = Skill::ALL.len();

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyPolicy {
    pub dims: usize,
    /// `SKILLS × (dims + 1)`, row-major.
    pub skill: Vec<f64>,
    /// `3 × (dims + 1)`.
    pub slot: Vec<f64>,
    /// `(dims + 1) × (SCENE_DIM + 1)`.
    pub bilinear: Vec<f64>,
}

impl ProxyPolicy {
    pub fn zeros(dims: usize) -> Self {
        let d1 = dims + 1;
        Self { dims, skill: vec![0.0; SKILLS * d1], slot: vec![0.0; 3 * d1], bilinear: vec![0.0; d1 * (SCENE_DIM + 1)] }
    }

    /// Standard normal weights.
    pub fn random(dims: usize, seed: u64) -> Self {
        let mut p = Self::zeros(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for w in p.skill.iter_mut().chain(p.slot.iter_mut()).chain(p.bilinear.iter_mut()) {
            *w = StandardNormal.sample(&mut rng);
        }
        p
    }

    fn len(&self) -> usize {
        self.skill.len() + self.slot.len() + self.bilinear.len()
    }

    fn flat(&self) -> Vec<f64> {
        [self.skill.as_slice(), &self.slot, &self.bilinear].concat()
    }

    fn set_flat(&mut self, flat: &[f64]) {
        let (a, rest) = flat.split_at(self.skill.len());
        let (b, c) = rest.split_at(self.slot.len());
        self.skill.copy_from_slice(a);
        self.slot.copy_from_slice(b);
        self.bilinear.copy_from_slice(c);
    }

    /// Skill scores and per-slot scores; a class logit is their sum.
    fn parts(&self, z: &[f64], scene: &[[f64; SCENE_DIM]; 3]) -> ([f64; SKILLS], [f64; 3]) {
        let d1 = self.dims + 1;
        let zh = |a: usize| if a < self.dims { z[a] } else { 1.0 };
        let mut skill = [0.0; SKILLS];
        for (s, out) in skill.iter_mut().enumerate() {
            *out = (0..d1).map(|a| self.skill[s * d1 + a] * zh(a)).sum();
        }
        // v = ẑᵀB
        let g1 = SCENE_DIM + 1;
        let mut v = vec![0.0; g1];
        for a in 0..d1 {
            let za = zh(a);
            let row = &self.bilinear[a * g1..(a + 1) * g1];
            v.iter_mut().zip(row).for_each(|(x, w)| *x += za * w);
        }
        let mut slot = [0.0; 3];
        for (j, out) in slot.iter_mut().enumerate() {
            let c: f64 = (0..d1).map(|a| self.slot[j * d1 + a] * zh(a)).sum();
            let b: f64 = scene[j].iter().zip(&v).map(|(g, x)| g * x).sum::<f64>() + v[SCENE_DIM];
            *out = c + b;
        }
        (skill, slot)
    }

    pub fn logits(&self, z: &[f64], scene: &[[f64; SCENE_DIM]; 3]) -> [f64; ActionClass::COUNT] {
        let (skill, slot) = self.parts(z, scene);
        let mut out = [0.0; ActionClass::COUNT];
        for (i, o) in out.iter_mut().enumerate() {
            *o = skill[i / 3] + slot[i % 3];
        }
        out
    }

    pub fn predict(&self, z: &[f64], scene: &[[f64; SCENE_DIM]; 3]) -> ActionClass {
        let l = self.logits(z, scene);
        let best = (0..l.len()).fold(0, |b, i| if l[i] > l[b] { i } else { b });
        ActionClass::from_index(best)
    }

    /// Adds the cross-entropy gradient of one example to `grad`.
    fn accumulate(&self, ex: &PolicyExample, grad: &mut ProxyPolicy) -> f64 {
        let l = self.logits(&ex.instruction, &ex.scene);
        let m = l.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = l.iter().map(|x| (x - m).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let target = ex.label.index();
        let mut d = [0.0; ActionClass::COUNT];
        for i in 0..d.len() {
            d[i] = exps[i] / sum - if i == target { 1.0 } else { 0.0 };
        }
        let d1 = self.dims + 1;
        let zh = |a: usize| if a < self.dims { ex.instruction[a] } else { 1.0 };
        let g1 = SCENE_DIM + 1;
        let mut gsum = vec![0.0; g1];
        for s in 0..SKILLS {
            let ds: f64 = (0..3).map(|j| d[s * 3 + j]).sum();
            for a in 0..d1 {
                grad.skill[s * d1 + a] += ds * zh(a);
            }
        }
        for j in 0..3 {
            let e: f64 = (0..SKILLS).map(|s| d[s * 3 + j]).sum();
            for a in 0..d1 {
                grad.slot[j * d1 + a] += e * zh(a);
            }
            for (b, g) in ex.scene[j].iter().enumerate() {
                gsum[b] += e * g;
            }
            gsum[SCENE_DIM] += e;
        }
        for a in 0..d1 {
            let za = zh(a);
            let row = &mut grad.bilinear[a * g1..(a + 1) * g1];
            row.iter_mut().zip(&gsum).for_each(|(r, g)| *r += za * g);
        }
        (sum.ln() + m) - l[target]
    }
}

/// Trains by minibatch Adam on cross-entropy with L2 decay.
pub fn train_proxy_policy(examples: &[PolicyExample], config: &ProxyConfig) -> Result<ProxyPolicy, EvalError> {
    let classes: std::collections::BTreeSet<usize> = examples.iter().map(|e| e.label.index()).collect();
    if classes.len() < 2 {
        return Err(EvalError::DegenerateTask(classes.len()));
    }
    if config.batch_size == 0 || !(config.learning_rate > 0.0) {
        return Err(EvalError::InvalidConfig("batch size and learning rate must be positive".into()));
    }
    let dims = examples[0].instruction.len();
    if examples.iter().any(|e| e.instruction.len() != dims) {
        return Err(EvalError::InvalidConfig("instruction embeddings differ in length".into()));
    }
    let mut policy = ProxyPolicy::zeros(dims);
    let mut flat = policy.flat();
    let mut adam = Adam::<f64>::new(policy.len(), config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..examples.len()).collect();
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grad = ProxyPolicy::zeros(dims);
            for &i in batch {
                policy.accumulate(&examples[i], &mut grad);
            }
            let scale = 1.0 / batch.len() as f64;
            let g: Vec<f64> = grad.flat().iter().zip(&flat).map(|(g, w)| g * scale + config.l2 * w).collect();
            adam.step(&mut flat, &g);
            policy.set_flat(&flat);
        }
    }
    Ok(policy)
}

/// Fraction of examples whose label the policy predicts.
pub fn policy_accuracy(policy: &ProxyPolicy, examples: &[PolicyExample]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let hits = examples.iter().filter(|e| policy.predict(&e.instruction, &e.scene) == e.label).count();
    hits as f64 / examples.len() as f64
}

fn embed_cached(
    encoder: &dyn Encoder,
    cache: &mut HashMap<String, Vec<f64>>,
    text: &str,
) -> Result<Vec<f64>, EvalError> {
    if let Some(v) = cache.get(text) {
        return Ok(v.clone());
    }
    let v: Vec<f64> = encoder.encode_text(text)?.normalized()?.values().iter().map(|&x| f64::from(x)).collect();
    cache.insert(text.to_owned(), v.clone());
    Ok(v)
}

/// One example per instruction record; the label is the episode's true
/// (skill, slot). Scene noise is seeded per episode and record.
pub fn examples_from_manifests(
    datasets: &[&DatasetManifest],
    episodes: &[SyntheticEpisode],
    encoder: &dyn Encoder,
    scene_noise: f64,
    seed: u64,
) -> Result<Vec<PolicyExample>, EvalError> {
    let index: HashMap<&str, &SyntheticEpisode> = episodes.iter().map(|e| (e.episode_id.as_str(), e)).collect();
    let mut cache = HashMap::new();
    let mut out = Vec::new();
    for ds in datasets {
        for entry in &ds.entries {
            let ep = index
                .get(entry.episode_id())
                .ok_or_else(|| EvalError::UnknownEpisode(entry.episode_id().to_owned()))?;
            for rec in &entry.instructions {
                let z = embed_cached(encoder, &mut cache, &rec.text)?;
                let noise_seed = seed ^ fnv1a64(ep.episode_id.as_bytes()) ^ fnv1a64(rec.instruction_id.as_bytes()).rotate_left(7);
                out.push(PolicyExample {
                    instruction: z,
                    scene: scene_features(&ep.scene, scene_noise, noise_seed),
                    label: ep.action_class(),
                });
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub category: EvalCategory,
    pub total: usize,
    pub successes: usize,
    pub rate: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuccessReport {
    pub categories: Vec<CategoryScore>,
    pub total: usize,
    pub successes: usize,
    pub overall: f64,
}

impl SuccessReport {
    pub fn rate(&self, category: EvalCategory) -> Option<f64> {
        self.categories.iter().find(|c| c.category == category).map(|c| c.rate)
    }
}

/// Success means the predicted class equals the class the instruction's
/// parse demands in the presented scene.
pub fn evaluate_policy(
    policy: &ProxyPolicy,
    eval_set: &EvalInstructionSet,
    encoder: &dyn Encoder,
    scene_noise: f64,
) -> Result<SuccessReport, EvalError> {
    let mut cache = HashMap::new();
    let mut per: Vec<CategoryScore> = EvalCategory::ALL
        .iter()
        .map(|&category| CategoryScore { category, total: 0, successes: 0, rate: 0.0 })
        .collect();
    for item in &eval_set.items {
        let z = embed_cached(encoder, &mut cache, &item.instruction)?;
        let scene = scene_features(&item.scene, scene_noise, item.scene_seed);
        let expected = parse_instruction(&item.instruction)
            .and_then(|p| p.resolve(&item.scene))
            .unwrap_or(item.expected);
        let c = per.iter_mut().find(|c| c.category == item.category).expect("all categories listed");
        c.total += 1;
        c.successes += usize::from(policy.predict(&z, &scene) == expected);
    }
    for c in &mut per {
        c.rate = if c.total == 0 { 0.0 } else { c.successes as f64 / c.total as f64 };
    }
    let total: usize = per.iter().map(|c| c.total).sum();
    let successes: usize = per.iter().map(|c| c.successes).sum();
    Ok(SuccessReport {
        categories: per,
        total,
        successes,
        overall: if total == 0 { 0.0 } else { successes as f64 / total as f64 },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::SyntheticEncoderConfig;
    use crate::world::{generate_world, GroundTruth, Receptacle, Slot, WorldConfig};
    use rand::seq::IndexedRandom;
    use rand::Rng;

    fn scene(rng: &mut ChaCha8Rng) -> Scene {
        let mut ids: Vec<ObjId> = (0..OBJECTS.len()).collect();
        ids.shuffle(rng);
        Scene { objects: [ids[0], ids[1], ids[2]], receptacle: Receptacle::Bowl, drawers_open: [false; 3] }
    }

    /// Fully specified instructions in random scenes.
    fn oracle_examples(n: usize, seed: u64) -> Vec<PolicyExample> {
        let world = generate_world(&WorldConfig { episode_count: 10, eval_per_category: 1, ..Default::default() }).unwrap();
        let enc = world.encoder(SyntheticEncoderConfig { dims: 64, attribute_basis_seed: 1, noise_scale: 0.05 });
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let skills = [Skill::Pick, Skill::KnockOver, Skill::PlaceUpright, Skill::OpenDrawer];
        (0..n)
            .map(|_| {
                let s = scene(&mut rng);
                let skill = *skills.choose(&mut rng).unwrap();
                let slot = *Slot::ALL.choose(&mut rng).unwrap();
                let truth = GroundTruth { skill, slot, reference_slot: None, receptacle: None };
                let text = crate::world::structured_command(&s, &truth);
                let text = if skill.uses_drawer() { text } else { format!("{text} on the {}", slot.word()) };
                let z: Vec<f64> = enc.encode_text(&text).unwrap().normalized().unwrap().values().iter().map(|&x| x as f64).collect();
                PolicyExample { instruction: z, scene: scene_features(&s, 0.1, rng.random()), label: ActionClass { skill, slot } }
            })
            .collect()
    }

    #[test]
    fn separable_oracle_data_is_learned() {
        let ex = oracle_examples(600, 1);
        let policy = train_proxy_policy(&ex, &ProxyConfig { epochs: 30, ..Default::default() }).unwrap();
        let acc = policy_accuracy(&policy, &ex);
        assert!(acc >= 0.95, "accuracy {acc}");
    }

    #[test]
    fn shuffled_labels_give_chance() {
        let base = oracle_examples(600, 2);
        let test = oracle_examples(1200, 3);
        // Predictions within one run are strongly correlated across items,
        // so the check averages over independent shuffles.
        let runs = 20;
        let mut shuffled = 0.0;
        let mut random = 0.0;
        for r in 0..runs {
            let mut train = base.clone();
            let mut labels: Vec<ActionClass> = train.iter().map(|e| e.label).collect();
            labels.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + r));
            train.iter_mut().zip(labels).for_each(|(e, l)| e.label = l);
            let policy = train_proxy_policy(&train, &ProxyConfig { seed: r, ..Default::default() }).unwrap();
            shuffled += policy_accuracy(&policy, &test) / runs as f64;
            random += policy_accuracy(&ProxyPolicy::random(64, r), &test) / runs as f64;
        }
        // Four skills times three slots, uniformly drawn.
        let chance = 1.0 / 12.0;
        assert!((shuffled - chance).abs() <= 0.035, "shuffled-label accuracy {shuffled} vs chance {chance}");
        assert!((random - chance).abs() <= 0.035, "random-weight accuracy {random} vs chance {chance}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let ex = oracle_examples(200, 4);
        let cfg = ProxyConfig { epochs: 3, seed: 11, ..Default::default() };
        let a = train_proxy_policy(&ex, &cfg).unwrap();
        assert_eq!(a, train_proxy_policy(&ex, &cfg).unwrap());
        assert_ne!(a, train_proxy_policy(&ex, &ProxyConfig { seed: 12, ..cfg }).unwrap());
    }

    #[test]
    fn single_class_is_degenerate() {
        let mut ex = oracle_examples(20, 5);
        let label = ex[0].label;
        ex.iter_mut().for_each(|e| e.label = label);
        assert!(matches!(train_proxy_policy(&ex, &ProxyConfig::default()), Err(EvalError::DegenerateTask(1))));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let ex = oracle_examples(3, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut policy = ProxyPolicy::random(64, 2);
        policy.skill.iter_mut().chain(&mut policy.slot).chain(&mut policy.bilinear).for_each(|w| *w *= 0.1);
        let mut grad = ProxyPolicy::zeros(64);
        policy.accumulate(&ex[0], &mut grad);
        let flat = policy.flat();
        let g = grad.flat();
        for _ in 0..40 {
            let i = rng.random_range(0..flat.len());
            let h = 1e-5;
            let mut p = policy.clone();
            let mut f = flat.clone();
            f[i] += h;
            p.set_flat(&f);
            let up = p.accumulate(&ex[0], &mut ProxyPolicy::zeros(64));
            f[i] -= 2.0 * h;
            p.set_flat(&f);
            let down = p.accumulate(&ex[0], &mut ProxyPolicy::zeros(64));
            let fd = (up - down) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-6, "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn category_counts_sum_to_the_eval_set() {
        let world = generate_world(&WorldConfig { episode_count: 50, eval_per_category: 7, ..Default::default() }).unwrap();
        let enc = world.encoder(SyntheticEncoderConfig { dims: 64, attribute_basis_seed: 1, noise_scale: 0.05 });
        let report = evaluate_policy(&ProxyPolicy::random(64, 1), &world.eval, &enc, 0.1).unwrap();
        assert_eq!(report.total, world.eval.items.len());
        assert_eq!(report.categories.iter().map(|c| c.total).sum::<usize>(), 21);
    }
}
