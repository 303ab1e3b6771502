//! Embedding vectors, the binary embedding store and encoder providers.

mod remote;
mod store;
mod synthetic;

use std::collections::HashMap;
use std::path::PathBuf;

use thiserror::Error;

use crate::data::{DataError, Frame};
use crate::scalar::{norm, Scalar};

pub use remote::{EncoderEndpoint, Modality, RemoteEncoder};
pub use store::{store_read, store_write, EmbeddingStore, STORE_MAGIC};
pub use synthetic::{FrameFeatures, SyntheticEncoder, SyntheticEncoderConfig, TextFeatures};

/// Tolerance on `| ||v|| - 1 |` for vectors flagged unit-norm.
pub const UNIT_NORM_TOL: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EmbedError {
    #[error("cannot normalize a zero vector")]
    ZeroNorm,
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimsMismatch { expected: usize, found: usize },
    #[error("no embedding stored for {0:?}")]
    NotFound(String),
    #[error("corrupt embedding store: {0}")]
    CorruptStore(String),
    #[error("duplicate embedding id {0:?}")]
    DuplicateId(String),
    #[error("embedding provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("asset error: {0}")]
    Asset(String),
    #[error("invalid encoder configuration: {0}")]
    InvalidConfig(String),
}

impl EmbedError {
    /// Transient provider failures may be retried by the caller.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::ProviderUnavailable(_))
    }
}

impl From<DataError> for EmbedError {
    fn from(e: DataError) -> Self {
        Self::Asset(e.to_string())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVector<T> {
    values: Vec<T>,
    unit_norm: bool,
}

impl<T: Scalar> EmbeddingVector<T> {
    /// Wraps raw encoder output; not flagged unit-norm.
    pub fn raw(values: Vec<T>) -> Self {
        Self {
            values,
            unit_norm: false,
        }
    }

    pub fn dims(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn into_values(self) -> Vec<T> {
        self.values
    }

    pub fn is_unit_norm(&self) -> bool {
        self.unit_norm
    }

    pub fn normalized(&self) -> Result<Self, EmbedError> {
        l2_normalize(&self.values)
    }

    pub fn cast<U: Scalar>(&self) -> EmbeddingVector<U> {
        EmbeddingVector {
            values: crate::scalar::cast_slice(&self.values),
            unit_norm: self.unit_norm,
        }
    }
}

/// Scales `v` to unit Euclidean length. The norm is accumulated in `f64`.
pub fn l2_normalize<T: Scalar>(v: &[T]) -> Result<EmbeddingVector<T>, EmbedError> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(EmbedError::ZeroNorm);
    }
    Ok(EmbeddingVector {
        values: v.iter().map(|&x| T::of(x.as_f64() / n)).collect(),
        unit_norm: true,
    })
}

/// Text and image encoders (the `T_enc` / `I_enc` stand-ins).
pub trait Encoder: Send + Sync {
    fn dims(&self) -> usize;
    fn encode_text(&self, text: &str) -> Result<EmbeddingVector<f32>, EmbedError>;
    fn encode_image(&self, frame: &Frame) -> Result<EmbeddingVector<f32>, EmbedError>;
}

/// Resolves frame references to their bytes.
pub trait AssetSource: Send + Sync {
    fn load(&self, frame: &Frame) -> Result<Vec<u8>, EmbedError>;
}

/// Assets stored as files below a root directory; `asset_ref` is a relative path.
#[derive(Clone, Debug)]
pub struct DirAssets {
    root: PathBuf,
}

impl DirAssets {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
}

impl AssetSource for DirAssets {
    fn load(&self, frame: &Frame) -> Result<Vec<u8>, EmbedError> {
        let path = self.root.join(&frame.asset_ref);
        let bytes = std::fs::read(&path)
            .map_err(|e| EmbedError::Asset(format!("{}: {e}", path.display())))?;
        frame.verify(&bytes)?;
        Ok(bytes)
    }
}

/// In-memory assets keyed by content hash.
#[derive(Clone, Debug, Default)]
pub struct MemoryAssets {
    by_hash: HashMap<u64, Vec<u8>>,
}

impl MemoryAssets {
    pub fn insert(&mut self, bytes: Vec<u8>) -> u64 {
        let h = crate::hash::fnv1a64(&bytes);
        self.by_hash.insert(h, bytes);
        h
    }

    pub fn get(&self, hash: u64) -> Option<&[u8]> {
        self.by_hash.get(&hash).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.by_hash.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_hash.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, &[u8])> {
        self.by_hash.iter().map(|(h, b)| (*h, b.as_slice()))
    }
}

impl AssetSource for MemoryAssets {
    fn load(&self, frame: &Frame) -> Result<Vec<u8>, EmbedError> {
        self.by_hash
            .get(&frame.content_hash)
            .cloned()
            .ok_or_else(|| EmbedError::Asset(format!("no asset with hash {}", frame.hash_hex())))
    }
}

/// Encodes and unit-normalizes both frames of every entry, keyed by the
/// frame's hex content hash. Frames shared between entries are encoded once.
pub fn embed_frames<'a>(
    frames: impl IntoIterator<Item = &'a Frame>,
    encoder: &dyn Encoder,
) -> Result<EmbeddingStore, EmbedError> {
    let mut seen = std::collections::HashSet::new();
    let mut pairs = Vec::new();
    for frame in frames {
        if seen.insert(frame.content_hash) {
            let v = encoder.encode_image(frame)?.normalized()?;
            pairs.push((frame.hash_hex(), v.into_values()));
        }
    }
    EmbeddingStore::from_pairs(encoder.dims(), pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalize_examples() {
        let v = l2_normalize(&[3.0f64, 4.0]).unwrap();
        assert_eq!(v.values(), &[0.6, 0.8]);
        assert!(v.is_unit_norm());
        let again = l2_normalize(v.values()).unwrap();
        assert_eq!(again.values(), v.values());
        assert_eq!(l2_normalize(&[0.0f64, 0.0]), Err(EmbedError::ZeroNorm));
    }

    #[test]
    fn f32_normalization_meets_tolerance() {
        let v: Vec<f32> = (0..512).map(|i| ((i * 37 % 101) as f32 - 50.0) * 0.013).collect();
        let u = l2_normalize(&v).unwrap();
        assert!((norm(u.values()) - 1.0).abs() <= UNIT_NORM_TOL);
    }

    #[test]
    fn memory_assets_resolve_by_hash() {
        let mut assets = MemoryAssets::default();
        assets.insert(b"abc".to_vec());
        let f = Frame::from_bytes("x", b"abc");
        assert_eq!(assets.load(&f).unwrap(), b"abc");
        let missing = Frame::from_bytes("y", b"zzz");
        assert!(matches!(assets.load(&missing), Err(EmbedError::Asset(_))));
    }

    #[test]
    fn dir_assets_verify_hash() {
        let dir = std::env::temp_dir().join(format!("dial-assets-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        std::fs::write(dir.join("f.bin"), b"content").unwrap();
        let src = DirAssets::new(&dir);
        src.load(&Frame::from_bytes("f.bin", b"content")).unwrap();
        assert!(src.load(&Frame::from_bytes("f.bin", b"other")).is_err());
        std::fs::remove_dir_all(dir).ok();
    }
}
