//! Non-visual instruction augmentation baselines: Gaussian noise on text
//! embeddings, word-level synonym substitution and generator-proposed
//! sentence rewrites.

use std::collections::HashMap;
use std::path::Path;
use std::time::Duration;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::normalize_instruction;
use crate::scalar::Scalar;

pub const CANDIDATE_PROPOSALS_TEMPLATE: &str = include_str!("../assets/prompt_candidate_proposals.txt");
pub const TASK_SUGGESTIONS_TEMPLATE: &str = include_str!("../assets/prompt_task_suggestions.txt");
pub const DEFAULT_SYNONYM_MAP: &str = include_str!("../assets/synonym_map.json");

const INSTRUCTION_SLOT: &str = "<INSTRUCTION_TO_AUGMENT>";

#[derive(Debug, Error, PartialEq)]
pub enum AugmentError {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimsMismatch { expected: usize, found: usize },
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("generator unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("no canned variants for {0:?}")]
    MissingCannedEntry(String),
    #[error("invalid synonym map: {0}")]
    InvalidMap(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianAugmentConfig {
    pub sigma: f64,
    pub dims: usize,
    pub seed: u64,
}

impl Default for GaussianAugmentConfig {
    fn default() -> Self {
        Self { sigma: 0.05, dims: 512, seed: 0 }
    }
}

/// `z + ε` with `ε ~ N(0, σ²I)` drawn from `rng`. Applied to the raw text
/// embedding, before any normalization.
pub fn add_gaussian_noise<T: Scalar, R: Rng>(z: &[T], sigma: f64, rng: &mut R) -> Vec<T> {
    z.iter()
        .map(|&x| {
            let e: f64 = StandardNormal.sample(rng);
            x + T::of(sigma * e)
        })
        .collect()
}

/// Seeded form of [`add_gaussian_noise`].
pub fn gaussian_noise_augment<T: Scalar>(z: &[T], config: &GaussianAugmentConfig) -> Result<Vec<T>, AugmentError> {
    if !(config.sigma >= 0.0) {
        return Err(AugmentError::InvalidConfig(format!("sigma {} must be nonnegative", config.sigma)));
    }
    if z.len() != config.dims {
        return Err(AugmentError::DimsMismatch { expected: config.dims, found: z.len() });
    }
    if config.sigma == 0.0 {
        return Ok(z.to_vec());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    Ok(add_gaussian_noise(z, config.sigma, &mut rng))
}

/// Ordered phrase → replacements map. Keys and replacements are stored
/// normalized and matched on whole tokens, longest key first.
#[derive(Clone, Debug, PartialEq)]
pub struct SynonymMap {
    entries: Vec<(Vec<String>, Vec<String>)>,
    by_first: HashMap<String, Vec<usize>>,
}

impl SynonymMap {
    pub fn from_json(text: &str) -> Result<Self, AugmentError> {
        let raw: IndexMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| AugmentError::InvalidMap(e.to_string()))?;
        Self::from_pairs(raw)
    }

    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<String>)>) -> Result<Self, AugmentError> {
        let norm = |s: &str| normalize_instruction(s).map_err(|e| AugmentError::InvalidMap(format!("{s:?}: {e}")));
        let mut entries: Vec<(Vec<String>, Vec<String>)> = Vec::new();
        for (key, values) in pairs {
            let key = norm(&key)?;
            if values.is_empty() {
                return Err(AugmentError::InvalidMap(format!("{key:?} has no replacements")));
            }
            let values = values.iter().map(|v| norm(v)).collect::<Result<Vec<_>, _>>()?;
            let tokens: Vec<String> = key.split(' ').map(str::to_owned).collect();
            match entries.iter_mut().find(|(k, _)| *k == tokens) {
                Some((_, existing)) => existing.extend(values),
                None => entries.push((tokens, values)),
            }
        }
        let mut by_first: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, (k, _)) in entries.iter().enumerate() {
            by_first.entry(k[0].clone()).or_default().push(i);
        }
        for idx in by_first.values_mut() {
            idx.sort_by_key(|&i| std::cmp::Reverse(entries[i].0.len()));
        }
        Ok(Self { entries, by_first })
    }

    pub fn builtin() -> Self {
        Self::from_json(DEFAULT_SYNONYM_MAP).expect("bundled synonym map parses")
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn replacements(&self, key: &str) -> Option<&[String]> {
        let tokens: Vec<&str> = key.split(' ').collect();
        self.entries.iter().find(|(k, _)| *k == tokens).map(|(_, v)| v.as_slice())
    }

    /// Longest key starting at `tokens[at]`, as (entry index, token count).
    fn longest_match(&self, tokens: &[&str], at: usize) -> Option<(usize, usize)> {
        self.by_first.get(tokens[at])?.iter().find_map(|&i| {
            let key = &self.entries[i].0;
            let fits = at + key.len() <= tokens.len() && key.iter().zip(&tokens[at..]).all(|(a, b)| a == b);
            fits.then_some((i, key.len()))
        })
    }

    /// Splits `text` into segments: `(Some(entry), phrase)` for matched keys
    /// and `(None, token)` for the rest.
    pub fn segments<'t>(&self, text: &'t str) -> Vec<(Option<usize>, Vec<&'t str>)> {
        let tokens: Vec<&str> = text.split(' ').filter(|t| !t.is_empty()).collect();
        let mut out = Vec::new();
        let mut at = 0;
        while at < tokens.len() {
            match self.longest_match(&tokens, at) {
                Some((entry, len)) => {
                    out.push((Some(entry), tokens[at..at + len].to_vec()));
                    at += len;
                }
                None => {
                    out.push((None, vec![tokens[at]]));
                    at += 1;
                }
            }
        }
        out
    }

    pub fn entry_replacements(&self, entry: usize) -> &[String] {
        &self.entries[entry].1
    }
}

/// `n_variants` rewrites of `text`. Each scans left to right, replaces every
/// longest-matching key with a uniformly sampled replacement and leaves
/// other tokens alone.
pub fn word_synonym_augment(text: &str, map: &SynonymMap, seed: u64, n_variants: usize) -> Vec<String> {
    let segments = map.segments(text);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n_variants)
        .map(|_| {
            let parts: Vec<String> = segments
                .iter()
                .map(|(entry, tokens)| match entry {
                    Some(e) => {
                        let reps = map.entry_replacements(*e);
                        reps[rng.random_range(0..reps.len())].clone()
                    }
                    None => tokens.join(" "),
                })
                .collect();
            parts.join(" ")
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptTemplate {
    CandidateProposals,
    TaskSuggestions,
}

impl PromptTemplate {
    pub fn text(self) -> &'static str {
        match self {
            Self::CandidateProposals => CANDIDATE_PROPOSALS_TEMPLATE,
            Self::TaskSuggestions => TASK_SUGGESTIONS_TEMPLATE,
        }
    }
}

pub fn render_candidate_prompt(instruction: &str) -> String {
    CANDIDATE_PROPOSALS_TEMPLATE.replace(INSTRUCTION_SLOT, instruction)
}

pub fn render_task_prompt(objects: [&str; 3]) -> String {
    let mut out = TASK_SUGGESTIONS_TEMPLATE.to_owned();
    for (i, obj) in objects.iter().enumerate() {
        out = out.replace(&format!("<OBJECT_{}>", i + 1), obj);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub enum GeneratorSource {
    /// `POST {base_url}/generate` with `{"prompt", "n"}` answering `{"variants": [...]}`.
    Remote { base_url: String, timeout: Duration },
    /// Instruction → stored variants, keys normalized.
    Canned(HashMap<String, Vec<String>>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorEndpoint {
    pub source: GeneratorSource,
    pub template: PromptTemplate,
}

impl GeneratorEndpoint {
    pub fn remote(base_url: impl Into<String>, timeout: Duration) -> Self {
        Self {
            source: GeneratorSource::Remote { base_url: base_url.into(), timeout },
            template: PromptTemplate::CandidateProposals,
        }
    }

    pub fn canned_from_json(text: &str) -> Result<Self, AugmentError> {
        let raw: IndexMap<String, Vec<String>> =
            serde_json::from_str(text).map_err(|e| AugmentError::InvalidConfig(format!("canned file: {e}")))?;
        let mut map = HashMap::new();
        for (k, v) in raw {
            let k = normalize_instruction(&k).map_err(|e| AugmentError::InvalidConfig(e.to_string()))?;
            map.insert(k, v);
        }
        Ok(Self { source: GeneratorSource::Canned(map), template: PromptTemplate::CandidateProposals })
    }

    pub fn canned_file(path: &Path) -> Result<Self, AugmentError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AugmentError::InvalidConfig(format!("canned file {}: {e}", path.display())))?;
        Self::canned_from_json(&text)
    }

    /// Up to `n` raw variants for `instruction`.
    fn generate(&self, instruction: &str, n: usize) -> Result<Vec<String>, AugmentError> {
        match &self.source {
            GeneratorSource::Canned(map) => {
                let v = map
                    .get(instruction)
                    .ok_or_else(|| AugmentError::MissingCannedEntry(instruction.to_owned()))?;
                Ok(v.iter().take(n).cloned().collect())
            }
            GeneratorSource::Remote { base_url, timeout } => {
                let prompt = match self.template {
                    PromptTemplate::CandidateProposals => render_candidate_prompt(instruction),
                    PromptTemplate::TaskSuggestions => TASK_SUGGESTIONS_TEMPLATE.to_owned(),
                };
                #[derive(Deserialize)]
                struct Reply {
                    variants: Vec<String>,
                }
                let agent: ureq::Agent = ureq::Agent::config_builder().timeout_global(Some(*timeout)).build().into();
                let url = format!("{}/generate", base_url.trim_end_matches('/'));
                let reply: Reply = agent
                    .post(&url)
                    .send_json(serde_json::json!({ "prompt": prompt, "n": n }))
                    .map_err(|e| AugmentError::ProviderUnavailable(format!("{url}: {e}")))?
                    .body_mut()
                    .read_json()
                    .map_err(|e| AugmentError::ProviderUnavailable(format!("{url}: bad response: {e}")))?;
                Ok(reply.variants.into_iter().take(n).collect())
            }
        }
    }
}

/// Whole-sentence rewrites of `instruction`, normalized. Variants that
/// normalize to nothing are dropped.
pub fn sentence_synonym_augment(
    instruction: &str,
    endpoint: &GeneratorEndpoint,
    n_variants: usize,
) -> Result<Vec<String>, AugmentError> {
    if n_variants == 0 {
        return Ok(Vec::new());
    }
    Ok(endpoint
        .generate(instruction, n_variants)?
        .iter()
        .filter_map(|v| normalize_instruction(v).ok())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigma_zero_is_identity() {
        let z = vec![0.1f32, -0.7, 3.5];
        let cfg = GaussianAugmentConfig { sigma: 0.0, dims: 3, seed: 4 };
        assert_eq!(gaussian_noise_augment(&z, &cfg).unwrap(), z);
        let cfg = GaussianAugmentConfig { sigma: 0.05, dims: 4, seed: 4 };
        assert_eq!(
            gaussian_noise_augment(&z, &cfg),
            Err(AugmentError::DimsMismatch { expected: 4, found: 3 })
        );
    }

    #[test]
    fn builtin_map_normalizes_keys() {
        let map = SynonymMap::builtin();
        assert_eq!(map.len(), 33);
        assert_eq!(map.replacements("blue").unwrap(), ["blue", "dark blue", "the blue", "a blue"]);
        assert!(map.replacements("rxbar blueberry").is_some());
    }

    #[test]
    fn single_mapping() {
        let map = SynonymMap::from_pairs([("pick".to_string(), vec!["lift".to_string()])]).unwrap();
        assert_eq!(word_synonym_augment("pick water bottle", &map, 99, 2), ["lift water bottle", "lift water bottle"]);
        assert_eq!(word_synonym_augment("open the drawer", &map, 1, 1), ["open the drawer"]);
    }

    #[test]
    fn longest_key_wins() {
        let map = SynonymMap::builtin();
        let segs = map.segments("pick rxbar blueberry");
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1].1, ["rxbar", "blueberry"]);
        let reps = map.replacements("rxbar blueberry").unwrap();
        for v in word_synonym_augment("pick rxbar blueberry", &map, 5, 20) {
            let picks = map.replacements("pick").unwrap();
            assert!(picks.iter().any(|p| reps.iter().any(|r| v == format!("{p} {r}"))), "{v}");
        }
    }

    #[test]
    fn blue_key_does_not_match_inside_blueberry() {
        let map = SynonymMap::builtin();
        let segs = map.segments("blueberry");
        assert_eq!(map.entry_replacements(segs[0].0.unwrap()), ["blueberry", "blue berry"]);
    }

    #[test]
    fn prompt_rendering() {
        let p = render_candidate_prompt("pick coke can");
        assert!(p.ends_with("\n10 rephrases for: pick coke can\nAnswer:\n"));
        assert!(!p.contains(INSTRUCTION_SLOT));
        let t = render_task_prompt(["apple", "sponge", "bowl"]);
        assert!(t.contains("10 tasks on a table with apple, sponge, and\nbowl:"));
    }

    #[test]
    fn canned_generator() {
        let ep = GeneratorEndpoint::canned_from_json(r#"{"Pick Mountain Dew": ["Grab the Dew!", "lift  mountain dew", "raise the soda"]}"#).unwrap();
        assert_eq!(
            sentence_synonym_augment("pick mountain dew", &ep, 3).unwrap(),
            ["grab the dew", "lift mountain dew", "raise the soda"]
        );
        assert_eq!(sentence_synonym_augment("pick mountain dew", &ep, 0).unwrap(), Vec::<String>::new());
        assert_eq!(
            sentence_synonym_augment("open drawer", &ep, 2),
            Err(AugmentError::MissingCannedEntry("open drawer".into()))
        );
    }
}
