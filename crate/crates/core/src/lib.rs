//! Dataset instruction augmentation: fuse episode frames into a joint
//! embedding, retrieve and select candidate instructions, and evaluate the
//! relabeled data.

pub mod augment;
pub mod data;
pub mod embed;
pub mod eval;
pub mod fusion;
pub mod hash;
pub mod relabel;
pub mod scalar;
pub mod world;

pub use data::{DataError, DatasetManifest, InstructionRecord, InstructionSource, ManifestEntry, Partition};
pub use embed::{EmbedError, EmbeddingStore, EmbeddingVector, Encoder};
pub use fusion::FusionError;
pub use scalar::Scalar;

pub type FusionParamsF32 = fusion::FusionParams<f32>;
pub type FusionParamsF64 = fusion::FusionParams<f64>;
pub type FusionCheckpointF64 = fusion::FusionCheckpoint<f64>;
