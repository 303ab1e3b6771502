//! Episode fusion head: `[z_first; z_last] -> relu(W1ᵀx + b1) -> W2ᵀr + b2`,
//! normalized to unit length, trained with a symmetric contrastive loss.

mod checkpoint;
mod loss;
mod train;
pub(crate) use train::Adam;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::embed::{EmbedError, EmbeddingVector};
use crate::scalar::{norm, Scalar};

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use loss::{contrastive_loss, loss_and_gradients, loss_from_logits, FusionExample};
pub use train::{
    rank_of_truth, retrieval_accuracy, retrieval_accuracy_from_embeddings, train_fusion, train_on_set,
    Evaluation, EvalPair, FusionCheckpoint, FusionTrainingSet, RetrievalAccuracy, TrainConfig, TrainOutcome,
};

pub const DEFAULT_HIDDEN: usize = 200;
/// Initial temperature, stored as `ln(1/0.07)`.
pub const INIT_TEMPERATURE: f64 = 0.07;
/// Upper bound on the logit scale `1/α`.
pub const MAX_LOGIT_SCALE: f64 = 100.0;
/// Lower bound on the logit scale `1/α`, i.e. `α ≤ 1`.
pub const MIN_LOGIT_SCALE: f64 = 1.0;

/// Unit-norm tolerance accepted on fusion inputs (encoder output is `f32`).
const INPUT_NORM_TOL: f64 = 1e-4;

#[derive(Debug, Error, PartialEq)]
pub enum FusionError {
    #[error("fused vector is zero before normalization")]
    DegenerateFusion,
    #[error("non-finite logits in contrastive loss")]
    NumericalOverflow,
    #[error("dataset too small: {available} training episodes for batch size {batch_size}")]
    InsufficientData { available: usize, batch_size: usize },
    #[error("true text {0:?} is not among the candidates")]
    MissingTruth(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
}

/// Parameters of the fusion head. `w1` is `(2d × h)` and `w2` is `(h × d)`,
/// both row-major. `log_scale = ln(1/α)`, so the temperature is
/// `α = exp(-log_scale)`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams<T> {
    pub dims: usize,
    pub hidden: usize,
    pub w1: Vec<T>,
    pub b1: Vec<T>,
    pub w2: Vec<T>,
    pub b2: Vec<T>,
    pub log_scale: T,
}

/// Intermediate values of one forward pass, kept for backpropagation.
#[derive(Clone, Debug)]
pub(crate) struct Forward<T> {
    pub x: Vec<T>,
    pub pre: Vec<T>,
    pub act: Vec<T>,
    pub u_norm: T,
    pub z: Vec<T>,
}

impl<T: Scalar> FusionParams<T> {
    pub fn zeros(dims: usize, hidden: usize) -> Self {
        Self {
            dims,
            hidden,
            w1: vec![T::zero(); 2 * dims * hidden],
            b1: vec![T::zero(); hidden],
            w2: vec![T::zero(); hidden * dims],
            b2: vec![T::zero(); dims],
            log_scale: T::zero(),
        }
    }

    /// He-style Gaussian initialization with zero biases and `α = 0.07`.
    pub fn init<R: Rng>(dims: usize, hidden: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(dims, hidden);
        let s1 = (2.0 / (2 * dims) as f64).sqrt();
        let s2 = (1.0 / hidden as f64).sqrt();
        for w in p.w1.iter_mut() {
            *w = T::of(s1 * Distribution::<f64>::sample(&StandardNormal, rng));
        }
        for w in p.w2.iter_mut() {
            *w = T::of(s2 * Distribution::<f64>::sample(&StandardNormal, rng));
        }
        p.log_scale = T::of((1.0 / INIT_TEMPERATURE).ln());
        p
    }

    pub fn temperature(&self) -> T {
        (-self.log_scale).exp()
    }

    /// Projects the logit scale back into `[1, 100]`.
    pub fn clamp_scale(&mut self) {
        let lo = T::of(MIN_LOGIT_SCALE.ln());
        let hi = T::of(MAX_LOGIT_SCALE.ln());
        self.log_scale = self.log_scale.max(lo).min(hi);
    }

    pub fn is_finite(&self) -> bool {
        self.w1
            .iter()
            .chain(&self.b1)
            .chain(&self.w2)
            .chain(&self.b2)
            .all(|x| x.is_finite())
            && self.log_scale.is_finite()
    }

    /// Number of scalar parameters, the logit scale included.
    pub fn len(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// All parameters in the order W1, b1, W2, b2, log_scale.
    pub fn to_flat(&self) -> Vec<T> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.push(self.log_scale);
        v
    }

    pub fn from_flat(dims: usize, hidden: usize, flat: &[T]) -> Self {
        let mut p = Self::zeros(dims, hidden);
        assert_eq!(flat.len(), p.len(), "flat parameter length");
        let mut it = flat.iter().copied();
        for dst in [&mut p.w1, &mut p.b1, &mut p.w2, &mut p.b2] {
            dst.iter_mut().for_each(|x| *x = it.next().expect("length checked"));
        }
        p.log_scale = it.next().expect("length checked");
        p
    }

    pub fn cast<U: Scalar>(&self) -> FusionParams<U> {
        use crate::scalar::cast_slice;
        FusionParams {
            dims: self.dims,
            hidden: self.hidden,
            w1: cast_slice(&self.w1),
            b1: cast_slice(&self.b1),
            w2: cast_slice(&self.w2),
            b2: cast_slice(&self.b2),
            log_scale: U::of(self.log_scale.as_f64()),
        }
    }

    pub(crate) fn forward(&self, first: &[T], last: &[T]) -> Result<Forward<T>, FusionError> {
        let (d, h) = (self.dims, self.hidden);
        if first.len() != d || last.len() != d {
            return Err(FusionError::Embed(EmbedError::DimsMismatch {
                expected: d,
                found: if first.len() != d { first.len() } else { last.len() },
            }));
        }
        let mut x = Vec::with_capacity(2 * d);
        x.extend_from_slice(first);
        x.extend_from_slice(last);
        let mut pre = self.b1.clone();
        for (i, &xi) in x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let row = &self.w1[i * h..(i + 1) * h];
            pre.iter_mut().zip(row).for_each(|(a, &w)| *a = *a + xi * w);
        }
        let act: Vec<T> = pre.iter().map(|&a| a.max(T::zero())).collect();
        let mut u = self.b2.clone();
        for (j, &r) in act.iter().enumerate() {
            if r == T::zero() {
                continue;
            }
            let row = &self.w2[j * d..(j + 1) * d];
            u.iter_mut().zip(row).for_each(|(a, &w)| *a = *a + r * w);
        }
        let n = norm(&u);
        if n == 0.0 || !n.is_finite() {
            return Err(FusionError::DegenerateFusion);
        }
        let u_norm = T::of(n);
        let z = u.iter().map(|&v| v / u_norm).collect();
        Ok(Forward { x, pre, act, u_norm, z })
    }
}

fn check_unit(v: &[impl Scalar], what: &str) -> Result<(), FusionError> {
    let n = norm(v);
    if (n - 1.0).abs() > INPUT_NORM_TOL {
        return Err(FusionError::InvalidInput(format!("{what} has norm {n}, expected 1")));
    }
    Ok(())
}

/// Fuses the first/last frame embeddings into a unit episode embedding.
pub fn fuse<T: Scalar>(
    first: &[T],
    last: &[T],
    params: &FusionParams<T>,
) -> Result<EmbeddingVector<T>, FusionError> {
    check_unit(first, "first-frame embedding")?;
    check_unit(last, "last-frame embedding")?;
    let fwd = params.forward(first, last)?;
    Ok(crate::embed::l2_normalize(&fwd.z)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        crate::embed::l2_normalize(&v).unwrap().into_values()
    }

    #[test]
    fn fused_output_is_unit_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = FusionParams::<f64>::init(8, 16, &mut rng);
        for _ in 0..20 {
            let (a, b) = (unit(&mut rng, 8), unit(&mut rng, 8));
            let z = fuse(&a, &b, &p).unwrap();
            assert!((norm(z.values()) - 1.0).abs() <= 1e-6);
            assert!(z.is_unit_norm());
        }
    }

    #[test]
    fn zero_output_layer_is_degenerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut p = FusionParams::<f64>::init(8, 16, &mut rng);
        p.w2.iter_mut().for_each(|w| *w = 0.0);
        p.b2.iter_mut().for_each(|w| *w = 0.0);
        let (a, b) = (unit(&mut rng, 8), unit(&mut rng, 8));
        assert_eq!(fuse(&a, &b, &p), Err(FusionError::DegenerateFusion));
    }

    #[test]
    fn frame_order_matters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = FusionParams::<f64>::init(8, 16, &mut rng);
        let (a, b) = (unit(&mut rng, 8), unit(&mut rng, 8));
        let ab = fuse(&a, &b, &p).unwrap();
        let ba = fuse(&b, &a, &p).unwrap();
        let diff: f64 = ab.values().iter().zip(ba.values()).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-3, "swapping frames should change the embedding, diff {diff}");
    }

    #[test]
    fn rejects_non_unit_and_wrong_dims() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = FusionParams::<f64>::init(4, 8, &mut rng);
        let a = unit(&mut rng, 4);
        assert!(matches!(fuse(&[2.0, 0.0, 0.0, 0.0], &a, &p), Err(FusionError::InvalidInput(_))));
        assert!(matches!(fuse(&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0], &p), Err(FusionError::Embed(_))));
    }

    #[test]
    fn generic_over_f32() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p64 = FusionParams::<f64>::init(8, 16, &mut rng);
        let p32: FusionParams<f32> = p64.cast();
        let (a, b) = (unit(&mut rng, 8), unit(&mut rng, 8));
        let z64 = fuse(&a, &b, &p64).unwrap();
        let a32: Vec<f32> = crate::scalar::cast_slice(&a);
        let b32: Vec<f32> = crate::scalar::cast_slice(&b);
        let z32 = fuse(&a32, &b32, &p32).unwrap();
        for (x, y) in z64.values().iter().zip(z32.values()) {
            assert!((x - f64::from(*y)).abs() < 1e-4);
        }
    }

    #[test]
    fn flat_round_trip_and_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut p = FusionParams::<f64>::init(3, 5, &mut rng);
        assert_eq!(FusionParams::from_flat(3, 5, &p.to_flat()), p);
        assert!((p.temperature() - 0.07).abs() < 1e-12);
        p.log_scale = 10.0;
        p.clamp_scale();
        assert!((p.temperature() - 0.01).abs() < 1e-12);
        p.log_scale = -3.0;
        p.clamp_scale();
        assert_eq!(p.temperature(), 1.0);
    }
}
