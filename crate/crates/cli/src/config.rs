//! `--config` file. Every section is optional; command-line flags win over
//! file values, which win over built-in defaults.

use std::path::{Path, PathBuf};

use dial_core::eval::{DownstreamConfig, PlantedConfig};
use dial_core::fusion::TrainConfig;
use dial_core::world::WorldConfig;
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: Option<u64>,
    pub encoder: EncoderSection,
    pub world: WorldConfig,
    pub ingest: IngestSection,
    pub augment: AugmentSection,
    pub train: TrainConfig,
    pub relabel: RelabelSection,
    pub downstream: DownstreamConfig,
    pub planted: PlantedConfig,
    pub serve: ServeSection,
}

impl PipelineConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    #[default]
    Synthetic,
    Remote,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderSection {
    pub kind: EncoderKind,
    pub dims: usize,
    pub noise_scale: f64,
    pub attribute_basis_seed: u64,
    pub base_url: Option<String>,
    pub timeout_secs: u64,
    pub max_in_flight: usize,
    /// Embedding cache for the remote encoder, read before and written after a stage.
    pub cache: Option<PathBuf>,
    /// Directory that frame `asset_ref`s are relative to.
    pub assets_root: Option<PathBuf>,
}

impl Default for EncoderSection {
    fn default() -> Self {
        Self {
            kind: EncoderKind::Synthetic,
            dims: 128,
            noise_scale: 0.1,
            attribute_basis_seed: 0,
            base_url: None,
            timeout_secs: 30,
            max_in_flight: 8,
            cache: None,
            assets_root: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestSection {
    pub annotated_fraction: f64,
}

impl Default for IngestSection {
    fn default() -> Self {
        Self { annotated_fraction: 0.035 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub sentence_variants: usize,
    pub generator_url: Option<String>,
    pub word_variants: usize,
    pub synonym_map: Option<PathBuf>,
    pub sigma: f64,
    pub copies: usize,
}

impl Default for AugmentSection {
    fn default() -> Self {
        Self { sentence_variants: 6, generator_url: None, word_variants: 1, synonym_map: None, sigma: 0.05, copies: 1 }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    TopK,
    #[default]
    MinP,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RelabelSection {
    pub method: Method,
    pub k: usize,
    pub p: f64,
    pub alpha: Option<f64>,
}

impl Default for RelabelSection {
    fn default() -> Self {
        Self { method: Method::MinP, k: 10, p: 0.2, alpha: None }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub data_dir: Option<PathBuf>,
    pub port: Option<u16>,
    pub quota: Option<usize>,
}
