//! Versioned binary checkpoint:
//! `"DIALFUS1"` | u32 dims | u32 hidden | W1 | b1 | W2 | b2 | log_temperature
//! (all f64 little-endian) | u64 step | f64 holdout_top1.

use super::{FusionCheckpoint, FusionError, FusionParams};
use crate::scalar::Scalar;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DIALFUS1";

pub fn write_checkpoint<T: Scalar>(ckpt: &FusionCheckpoint<T>) -> Vec<u8> {
    let p = &ckpt.params;
    let mut out = Vec::with_capacity(16 + 8 * (p.len() + 2));
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(p.dims as u32).to_le_bytes());
    out.extend_from_slice(&(p.hidden as u32).to_le_bytes());
    for x in p.to_flat() {
        out.extend_from_slice(&x.as_f64().to_le_bytes());
    }
    out.extend_from_slice(&ckpt.step.to_le_bytes());
    out.extend_from_slice(&ckpt.holdout_top1.to_le_bytes());
    out
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<FusionCheckpoint<T>, FusionError> {
    let corrupt = |m: &str| FusionError::CorruptCheckpoint(m.to_owned());
    if bytes.len() < 16 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes")) as usize;
    let (dims, hidden) = (u32_at(8), u32_at(12));
    let n_params = FusionParams::<T>::zeros(dims, hidden).len();
    let expected = 16 + 8 * n_params + 16;
    if bytes.len() != expected {
        return Err(FusionError::CorruptCheckpoint(format!(
            "{} bytes, expected {expected} for dims {dims} hidden {hidden}",
            bytes.len()
        )));
    }
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
    let flat: Vec<T> = (0..n_params).map(|i| T::of(f64_at(16 + 8 * i))).collect();
    let tail = 16 + 8 * n_params;
    let step = u64::from_le_bytes(bytes[tail..tail + 8].try_into().expect("8 bytes"));
    Ok(FusionCheckpoint {
        params: FusionParams::from_flat(dims, hidden, &flat),
        step,
        holdout_top1: f64_at(tail + 8),
    })
}
