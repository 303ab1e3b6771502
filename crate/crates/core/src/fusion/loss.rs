//! Symmetric contrastive loss and its analytic gradients.
//!
//! With logits `L[n][k] = (z_s[n] · z_l[k]) / α`, the loss is the batch mean
//! of `-log softmax_k(L[n][·])[n] - log softmax_k(L[·][n])[n]`.

use super::{FusionError, FusionParams};
use crate::scalar::{dot, log_sum_exp, Scalar};

/// One training pair: both frame embeddings and the instruction embedding,
/// all unit-norm.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionExample<T> {
    pub first: Vec<T>,
    pub last: Vec<T>,
    pub text: Vec<T>,
}

/// Loss and `∂loss/∂logits` for a square logit matrix (rows: episodes,
/// columns: texts). Max subtraction keeps the exponentials finite.
pub fn loss_from_logits<T: Scalar>(logits: &[Vec<T>]) -> Result<(T, Vec<Vec<T>>), FusionError> {
    let b = logits.len();
    if b == 0 || logits.iter().any(|r| r.len() != b) {
        return Err(FusionError::InvalidInput(format!("logit matrix must be square and non-empty, got {b} rows")));
    }
    if logits.iter().flatten().any(|x| !x.is_finite()) {
        return Err(FusionError::NumericalOverflow);
    }
    let row_lse: Vec<T> = logits.iter().map(|r| log_sum_exp(r.iter().copied())).collect();
    let col_lse: Vec<T> = (0..b)
        .map(|k| log_sum_exp((0..b).map(|n| logits[n][k])))
        .collect();
    let inv_b = T::one() / T::of(b as f64);
    let mut total = T::zero();
    for n in 0..b {
        total = total + (row_lse[n] - logits[n][n]) + (col_lse[n] - logits[n][n]);
    }
    let loss = total * inv_b;
    if !loss.is_finite() {
        return Err(FusionError::NumericalOverflow);
    }
    let grad = (0..b)
        .map(|n| {
            (0..b)
                .map(|k| {
                    let mut g = (logits[n][k] - row_lse[n]).exp() + (logits[n][k] - col_lse[k]).exp();
                    if n == k {
                        g = g - T::of(2.0);
                    }
                    g * inv_b
                })
                .collect()
        })
        .collect();
    Ok((loss, grad))
}

/// Batch-mean symmetric cross-entropy over dot products scaled by `1/α`.
pub fn contrastive_loss<T: Scalar>(states: &[Vec<T>], texts: &[Vec<T>], alpha: T) -> Result<T, FusionError> {
    if states.len() != texts.len() {
        return Err(FusionError::InvalidInput(format!(
            "{} episode embeddings vs {} text embeddings",
            states.len(),
            texts.len()
        )));
    }
    if !(alpha > T::zero()) {
        return Err(FusionError::InvalidInput("temperature must be positive".into()));
    }
    let logits: Vec<Vec<T>> = states
        .iter()
        .map(|s| texts.iter().map(|t| dot(s, t) / alpha).collect())
        .collect();
    Ok(loss_from_logits(&logits)?.0)
}

/// Mean loss over `batch` and its gradient with respect to every parameter,
/// the logit scale included. Text embeddings are held fixed.
pub fn loss_and_gradients<T: Scalar>(
    params: &FusionParams<T>,
    batch: &[FusionExample<T>],
) -> Result<(T, FusionParams<T>), FusionError> {
    let (d, h) = (params.dims, params.hidden);
    let fwds = batch
        .iter()
        .map(|ex| params.forward(&ex.first, &ex.last))
        .collect::<Result<Vec<_>, _>>()?;
    if batch.iter().any(|ex| ex.text.len() != d) {
        return Err(FusionError::InvalidInput("text embedding has wrong dimension".into()));
    }
    let scale = params.log_scale.exp();
    let logits: Vec<Vec<T>> = fwds
        .iter()
        .map(|f| batch.iter().map(|ex| scale * dot(&f.z, &ex.text)).collect())
        .collect();
    let (loss, g_logits) = loss_from_logits(&logits)?;

    let mut grads = FusionParams::zeros(d, h);
    grads.log_scale = g_logits
        .iter()
        .flatten()
        .zip(logits.iter().flatten())
        .fold(T::zero(), |acc, (&g, &l)| acc + g * l);

    let mut dz = vec![T::zero(); d];
    let mut du = vec![T::zero(); d];
    let mut da = vec![T::zero(); h];
    for (n, fwd) in fwds.iter().enumerate() {
        dz.iter_mut().for_each(|x| *x = T::zero());
        for (k, ex) in batch.iter().enumerate() {
            let c = scale * g_logits[n][k];
            dz.iter_mut().zip(&ex.text).for_each(|(a, &t)| *a = *a + c * t);
        }
        // Through z = u / |u|.
        let proj = dot(&fwd.z, &dz);
        for ((o, &g), &z) in du.iter_mut().zip(&dz).zip(&fwd.z) {
            *o = (g - z * proj) / fwd.u_norm;
        }
        grads.b2.iter_mut().zip(&du).for_each(|(a, &g)| *a = *a + g);
        for j in 0..h {
            let r = fwd.act[j];
            let row = &params.w2[j * d..(j + 1) * d];
            if r != T::zero() {
                let grow = &mut grads.w2[j * d..(j + 1) * d];
                grow.iter_mut().zip(&du).for_each(|(a, &g)| *a = *a + r * g);
            }
            da[j] = if fwd.pre[j] > T::zero() { dot(row, &du) } else { T::zero() };
        }
        grads.b1.iter_mut().zip(&da).for_each(|(a, &g)| *a = *a + g);
        for (i, &xi) in fwd.x.iter().enumerate() {
            if xi == T::zero() {
                continue;
            }
            let grow = &mut grads.w1[i * h..(i + 1) * h];
            grow.iter_mut().zip(&da).for_each(|(a, &g)| *a = *a + xi * g);
        }
    }
    Ok((loss, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::tests::unit;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn equal_logit_batch(b: usize) -> Vec<Vec<f64>> {
        vec![vec![0.3; b]; b]
    }

    #[test]
    fn uniform_logits_give_two_ln_b() {
        for b in [2usize, 4, 64] {
            let (loss, _) = loss_from_logits(&equal_logit_batch(b)).unwrap();
            assert!((loss - 2.0 * (b as f64).ln()).abs() < 1e-9, "B={b}: {loss}");
        }
        let s = vec![vec![1.0, 0.0]; 4];
        let loss = contrastive_loss(&s, &s, 0.5).unwrap();
        assert!((loss - 2.0 * 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn single_pair_has_zero_loss_and_gradient() {
        let (loss, g) = loss_from_logits(&[vec![5.0f64]]).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(g, vec![vec![0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = FusionParams::<f64>::init(4, 16, &mut rng);
        let ex = FusionExample { first: unit(&mut rng, 4), last: unit(&mut rng, 4), text: unit(&mut rng, 4) };
        let (loss, grads) = loss_and_gradients(&p, &[ex]).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grads.to_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_by_two_identity_example() {
        // Four terms: each is -ln(e / (e + 1)).
        let oracle = 2.0 * -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((oracle - 0.626523).abs() < 1e-6);
        let s = vec![vec![1.0, 0.0], vec![0.0, 1.0]];
        let loss = contrastive_loss(&s, &s, 1.0).unwrap();
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        use rand::Rng;
        let logits: Vec<Vec<f64>> = (0..5).map(|_| (0..5).map(|_| rng.random::<f64>() * 4.0).collect()).collect();
        let (base, g) = loss_from_logits(&logits).unwrap();
        let shifted: Vec<Vec<f64>> = logits.iter().map(|r| r.iter().map(|x| x + 7.25).collect()).collect();
        let (moved, _) = loss_from_logits(&shifted).unwrap();
        assert!((base - moved).abs() < 1e-12);
        let directional: f64 = g.iter().flatten().sum();
        assert!(directional.abs() < 1e-12);
    }

    #[test]
    fn large_scale_does_not_overflow() {
        let logits: Vec<Vec<f64>> = vec![vec![1000.0, -1000.0], vec![-1000.0, 1000.0]];
        let (loss, _) = loss_from_logits(&logits).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
        assert_eq!(loss_from_logits(&[vec![f64::INFINITY]]).unwrap_err(), FusionError::NumericalOverflow);
    }

    #[test]
    fn loss_is_nonnegative_on_random_batches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for b in 1..8 {
            let s: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 6)).collect();
            let t: Vec<Vec<f64>> = (0..b).map(|_| unit(&mut rng, 6)).collect();
            assert!(contrastive_loss(&s, &t, 0.07).unwrap() >= 0.0);
        }
    }
}
