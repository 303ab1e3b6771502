use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use dial_core::embed::{
    store_read, DirAssets, EncoderEndpoint, RemoteEncoder, SyntheticEncoder, SyntheticEncoderConfig,
};
use dial_core::world::{attribute_value_count, WorldFrames, WorldText};
use dial_core::Encoder;

use crate::artifact::write_atomic;
use crate::config::{EncoderKind, EncoderSection};
use crate::CliError;

pub enum StageEncoder {
    Synthetic(SyntheticEncoder),
    Remote { encoder: RemoteEncoder, cache: Option<PathBuf> },
}

impl StageEncoder {
    /// `assets_root` is used when the section does not name one.
    pub fn build(section: &EncoderSection, assets_root: &Path, stage: &'static str) -> Result<Self, CliError> {
        let root = section.assets_root.clone().unwrap_or_else(|| assets_root.to_owned());
        let assets = Arc::new(DirAssets::new(root));
        let fail = |m: String| CliError::Stage { stage, message: m };
        match section.kind {
            EncoderKind::Synthetic => {
                let cfg = SyntheticEncoderConfig {
                    dims: section.dims,
                    attribute_basis_seed: section.attribute_basis_seed,
                    noise_scale: section.noise_scale,
                };
                cfg.validate(attribute_value_count()).map_err(|e| fail(e.to_string()))?;
                Ok(Self::Synthetic(SyntheticEncoder::new(cfg, Arc::new(WorldText), Arc::new(WorldFrames), assets)))
            }
            EncoderKind::Remote => {
                let base_url = section
                    .base_url
                    .clone()
                    .ok_or_else(|| CliError::Config("remote encoder needs base_url".into()))?;
                let endpoint = EncoderEndpoint {
                    base_url,
                    timeout: Duration::from_secs(section.timeout_secs),
                    dims: section.dims,
                    max_in_flight: section.max_in_flight,
                };
                let mut encoder = RemoteEncoder::new(endpoint, assets);
                if let Some(path) = &section.cache {
                    if let Ok(bytes) = std::fs::read(path) {
                        let store = store_read(&bytes).map_err(|e| fail(format!("{}: {e}", path.display())))?;
                        encoder = encoder.with_cache(&store).map_err(|e| fail(e.to_string()))?;
                    }
                }
                Ok(Self::Remote { encoder, cache: section.cache.clone() })
            }
        }
    }

    pub fn get(&self) -> &dyn Encoder {
        match self {
            Self::Synthetic(e) => e,
            Self::Remote { encoder, .. } => encoder,
        }
    }

    /// Saves the remote cache, if one is configured.
    pub fn finish(&self) -> Result<(), CliError> {
        if let Self::Remote { encoder, cache: Some(path) } = self {
            write_atomic(path, &encoder.cache_store().to_bytes())?;
        }
        Ok(())
    }
}
