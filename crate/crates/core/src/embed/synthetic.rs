//! Deterministic synthetic encoder with planted attribute structure.
//!
//! Every feature token (an attribute value such as `skill:pick`, or a lexical
//! token) owns a fixed random unit vector drawn from the basis seed. An input
//! is mapped to weighted tokens by a featurizer; its embedding is the
//! normalized weighted sum of their vectors plus Gaussian noise whose expected
//! norm is `noise_scale`. Output is a pure function of (config, input).

use std::collections::HashMap;
use std::sync::{Arc, RwLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{AssetSource, EmbedError, EmbeddingVector, Encoder};
use crate::data::Frame;
use crate::hash::fnv1a64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticEncoderConfig {
    pub dims: usize,
    pub attribute_basis_seed: u64,
    pub noise_scale: f64,
}

impl SyntheticEncoderConfig {
    pub fn validate(&self, attribute_values: usize) -> Result<(), EmbedError> {
        if self.dims < attribute_values.max(1) {
            return Err(EmbedError::InvalidConfig(format!(
                "dims {} is smaller than the {attribute_values} attribute values",
                self.dims
            )));
        }
        if !(self.noise_scale >= 0.0) {
            return Err(EmbedError::InvalidConfig("noise_scale must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Maps text to weighted feature tokens.
pub trait TextFeatures: Send + Sync {
    fn text_features(&self, text: &str) -> Vec<(String, f32)>;
}

/// Maps raw frame bytes to weighted feature tokens.
pub trait FrameFeatures: Send + Sync {
    fn frame_features(&self, bytes: &[u8]) -> Result<Vec<(String, f32)>, String>;
}

pub struct SyntheticEncoder {
    config: SyntheticEncoderConfig,
    text: Arc<dyn TextFeatures>,
    frames: Arc<dyn FrameFeatures>,
    assets: Arc<dyn AssetSource>,
    basis: RwLock<HashMap<String, Arc<[f64]>>>,
}

impl SyntheticEncoder {
    pub fn new(
        config: SyntheticEncoderConfig,
        text: Arc<dyn TextFeatures>,
        frames: Arc<dyn FrameFeatures>,
        assets: Arc<dyn AssetSource>,
    ) -> Self {
        Self {
            config,
            text,
            frames,
            assets,
            basis: RwLock::new(HashMap::new()),
        }
    }

    pub fn config(&self) -> &SyntheticEncoderConfig {
        &self.config
    }

    /// Unit basis vector owned by `token`.
    pub fn basis_vector(&self, token: &str) -> Arc<[f64]> {
        if let Some(v) = self.basis.read().expect("basis lock").get(token) {
            return v.clone();
        }
        let seed = self.config.attribute_basis_seed ^ fnv1a64(token.as_bytes()).rotate_left(17);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v: Vec<f64> = (0..self.config.dims)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= n);
        let v: Arc<[f64]> = v.into();
        self.basis
            .write()
            .expect("basis lock")
            .entry(token.to_owned())
            .or_insert(v)
            .clone()
    }

    /// Embeds an explicit weighted token list. `salt` seeds the noise.
    pub fn embed_features(&self, features: &[(String, f32)], salt: &[u8]) -> Result<EmbeddingVector<f32>, EmbedError> {
        let d = self.config.dims;
        let mut acc = vec![0.0f64; d];
        for (token, w) in features {
            let b = self.basis_vector(token);
            acc.iter_mut().zip(b.iter()).for_each(|(a, x)| *a += f64::from(*w) * x);
        }
        let n = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n == 0.0 {
            return Err(EmbedError::ZeroNorm);
        }
        let sigma = self.config.noise_scale / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.attribute_basis_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ fnv1a64(salt));
        let values = acc
            .iter()
            .map(|a| {
                let e: f64 = StandardNormal.sample(&mut rng);
                (a / n + sigma * e) as f32
            })
            .collect();
        Ok(EmbeddingVector::raw(values))
    }
}

impl Encoder for SyntheticEncoder {
    fn dims(&self) -> usize {
        self.config.dims
    }

    fn encode_text(&self, text: &str) -> Result<EmbeddingVector<f32>, EmbedError> {
        let features = self.text.text_features(text);
        let mut salt = b"text:".to_vec();
        salt.extend_from_slice(text.as_bytes());
        self.embed_features(&features, &salt)
    }

    fn encode_image(&self, frame: &Frame) -> Result<EmbeddingVector<f32>, EmbedError> {
        let bytes = self.assets.load(frame)?;
        let features = self.frames.frame_features(&bytes).map_err(EmbedError::Asset)?;
        let mut salt = b"image:".to_vec();
        salt.extend_from_slice(&frame.content_hash.to_le_bytes());
        self.embed_features(&features, &salt)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embed::MemoryAssets;

    struct Words;
    impl TextFeatures for Words {
        fn text_features(&self, text: &str) -> Vec<(String, f32)> {
            text.split_whitespace().map(|w| (w.to_owned(), 1.0)).collect()
        }
    }
    impl FrameFeatures for Words {
        fn frame_features(&self, bytes: &[u8]) -> Result<Vec<(String, f32)>, String> {
            let s = std::str::from_utf8(bytes).map_err(|e| e.to_string())?;
            Ok(self.text_features(s))
        }
    }

    fn encoder(noise: f64, assets: MemoryAssets) -> SyntheticEncoder {
        SyntheticEncoder::new(
            SyntheticEncoderConfig { dims: 32, attribute_basis_seed: 5, noise_scale: noise },
            Arc::new(Words),
            Arc::new(Words),
            Arc::new(assets),
        )
    }

    #[test]
    fn deterministic_per_input() {
        let a = encoder(0.1, MemoryAssets::default());
        let b = encoder(0.1, MemoryAssets::default());
        assert_eq!(a.encode_text("pick can").unwrap(), b.encode_text("pick can").unwrap());
        assert_ne!(a.encode_text("pick can").unwrap(), a.encode_text("pick apple").unwrap());
    }

    #[test]
    fn noiseless_output_is_unit() {
        let e = encoder(0.0, MemoryAssets::default());
        let v = e.encode_text("lift the apple").unwrap();
        assert!((crate::scalar::norm(v.values()) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn images_decode_through_assets() {
        let mut assets = MemoryAssets::default();
        assets.insert(b"obj:can".to_vec());
        let e = encoder(0.0, assets);
        let f = Frame::from_bytes("f", b"obj:can");
        let img = e.encode_image(&f).unwrap();
        let txt = e.encode_text("obj:can").unwrap();
        assert!(img.values().iter().zip(txt.values()).all(|(a, b)| (a - b).abs() < 1e-6));
    }

    #[test]
    fn config_validation() {
        let c = SyntheticEncoderConfig { dims: 4, attribute_basis_seed: 0, noise_scale: 0.0 };
        assert!(c.validate(5).is_err());
        assert!(c.validate(4).is_ok());
    }
}
