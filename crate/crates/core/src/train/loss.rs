//! Supervised contrastive loss over (anchor, positive, hard negative) triplets.
//!
//! For anchor `i` the softmax runs over the `2N` cosine similarities to every
//! in-batch positive and hard negative, scaled by `1/τ`; the target is the
//! anchor's own positive.

use ndarray::{Array1, Array2, ArrayView1};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::TrainError;
use crate::types::EmbeddingVector;

#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveBatch {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub negatives: Array2<f64>,
}

impl ContrastiveBatch {
    pub fn new(
        anchors: Array2<f64>,
        positives: Array2<f64>,
        negatives: Array2<f64>,
    ) -> Result<Self, TrainError> {
        let shape = anchors.dim();
        if positives.dim() != shape || negatives.dim() != shape {
            return Err(TrainError::InvalidBatch(format!(
                "shapes differ: {:?}, {:?}, {:?}",
                shape,
                positives.dim(),
                negatives.dim()
            )));
        }
        if shape.0 < 2 {
            return Err(TrainError::InvalidBatch(format!(
                "batch size {} is below 2",
                shape.0
            )));
        }
        if shape.1 == 0 {
            return Err(TrainError::InvalidBatch("zero-dimensional embeddings".into()));
        }
        Ok(Self {
            anchors,
            positives,
            negatives,
        })
    }

    pub fn from_embeddings(
        anchors: &[EmbeddingVector],
        positives: &[EmbeddingVector],
        negatives: &[EmbeddingVector],
    ) -> Result<Self, TrainError> {
        let stack = |v: &[EmbeddingVector]| -> Result<Array2<f64>, TrainError> {
            let dim = v.first().map_or(0, EmbeddingVector::dim);
            if v.iter().any(|e| e.dim() != dim) {
                return Err(TrainError::InvalidBatch("embedding dimensions differ".into()));
            }
            let flat: Vec<f64> = v.iter().flat_map(|e| e.values().iter().copied()).collect();
            Ok(Array2::from_shape_vec((v.len(), dim), flat).expect("consistent shape"))
        };
        Self::new(stack(anchors)?, stack(positives)?, stack(negatives)?)
    }

    pub fn len(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.nrows() == 0
    }

    /// A random batch drawn from `N(0, 1)`.
    pub fn random(n: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let dist = Normal::new(0.0, 1.0).expect("valid std");
        let mut draw = || Array2::from_shape_simple_fn((n, dim), || dist.sample(&mut rng));
        let anchors = draw();
        let positives = draw();
        let negatives = draw();
        Self::new(anchors, positives, negatives).expect("valid random batch")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub per_example: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossGradients {
    pub anchors: Array2<f64>,
    pub positives: Array2<f64>,
    pub negatives: Array2<f64>,
}

fn norm(v: ArrayView1<'_, f64>) -> f64 {
    v.dot(&v).sqrt()
}

/// Cosine and its gradients with respect to both inputs.
fn cosine_with_grad(
    a: ArrayView1<'_, f64>,
    b: ArrayView1<'_, f64>,
) -> Result<(f64, Array1<f64>, Array1<f64>), TrainError> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return Err(TrainError::InvalidBatch("zero embedding in batch".into()));
    }
    let c = a.dot(&b) / (na * nb);
    let ga = &b / (na * nb) - &a * (c / (na * na));
    let gb = &a / (na * nb) - &b * (c / (nb * nb));
    Ok((c, ga, gb))
}

/// Loss value and per-example losses.
pub fn contrastive_loss(batch: &ContrastiveBatch, tau: f64) -> Result<LossOutput, TrainError> {
    contrastive_loss_with_grad(batch, tau).map(|(out, _)| out)
}

/// Loss plus gradients of the mean loss with respect to every embedding entry.
pub fn contrastive_loss_with_grad(
    batch: &ContrastiveBatch,
    tau: f64,
) -> Result<(LossOutput, LossGradients), TrainError> {
    if !(tau > 0.0) {
        return Err(TrainError::InvalidConfig(format!("temperature {tau} must be positive")));
    }
    let n = batch.len();
    let mut grads = LossGradients {
        anchors: Array2::zeros(batch.anchors.dim()),
        positives: Array2::zeros(batch.positives.dim()),
        negatives: Array2::zeros(batch.negatives.dim()),
    };
    let mut per_example = Vec::with_capacity(n);
    for i in 0..n {
        let a = batch.anchors.row(i);
        let mut logits = Vec::with_capacity(2 * n);
        let mut parts = Vec::with_capacity(2 * n);
        for j in 0..n {
            parts.push(cosine_with_grad(a, batch.positives.row(j))?);
            parts.push(cosine_with_grad(a, batch.negatives.row(j))?);
        }
        logits.extend(parts.iter().map(|(c, _, _)| c / tau));
        assert_eq!(logits.len(), 2 * n, "denominator must hold 2N terms");
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let sum: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + sum.ln();
        // Positive j sits at 2j, negative j at 2j+1.
        let loss_i = lse - logits[2 * i];
        if !loss_i.is_finite() {
            return Err(TrainError::NonFiniteLoss { step: None });
        }
        per_example.push(loss_i);

        let inv = 1.0 / (n as f64 * tau);
        for (k, (_, ga, gb)) in parts.iter().enumerate() {
            let mut coeff = (logits[k] - lse).exp();
            if k == 2 * i {
                coeff -= 1.0;
            }
            let coeff = coeff * inv;
            grads.anchors.row_mut(i).scaled_add(coeff, ga);
            let j = k / 2;
            if k % 2 == 0 {
                grads.positives.row_mut(j).scaled_add(coeff, gb);
            } else {
                grads.negatives.row_mut(j).scaled_add(coeff, gb);
            }
        }
    }
    let loss = per_example.iter().sum::<f64>() / n as f64;
    Ok((LossOutput { loss, per_example }, grads))
}

/// Relative error `|g − ĝ| / max(|g|, |ĝ|, 1e-3)`; the floor keeps near-zero
/// entries from dominating through finite-difference round-off.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Max relative error of the analytic gradient against central differences (step 1e-6).
pub fn loss_gradient_check(batch: &ContrastiveBatch, tau: f64) -> Result<f64, TrainError> {
    const STEP: f64 = 1e-6;
    let (_, grads) = contrastive_loss_with_grad(batch, tau)?;
    let mut worst: f64 = 0.0;
    for which in 0..3 {
        let analytic = match which {
            0 => &grads.anchors,
            1 => &grads.positives,
            _ => &grads.negatives,
        };
        for ((r, c), &g) in analytic.indexed_iter() {
            let eval = |delta: f64| -> Result<f64, TrainError> {
                let mut b = batch.clone();
                let m = match which {
                    0 => &mut b.anchors,
                    1 => &mut b.positives,
                    _ => &mut b.negatives,
                };
                m[[r, c]] += delta;
                Ok(contrastive_loss(&b, tau)?.loss)
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(g, numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_cosines_give_log_2n() {
        let ones = Array2::from_elem((2, 3), 1.0);
        let batch = ContrastiveBatch::new(ones.clone(), ones.clone(), ones).unwrap();
        let out = contrastive_loss(&batch, 0.5).unwrap();
        for l in &out.per_example {
            assert!((l - 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_n2() {
        // cos(h_i, h_i+) = 1, every other cosine 0.
        let anchors = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0]];
        let positives = anchors.clone();
        let negatives = array![[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 0.0, 1.0]];
        let batch = ContrastiveBatch::new(anchors, positives, negatives).unwrap();
        let out = contrastive_loss(&batch, 0.5).unwrap();
        let e2 = 2f64.exp();
        let expected = -(e2 / (e2 + 3.0)).ln();
        assert!((expected - 0.340_753).abs() < 1e-6);
        for l in &out.per_example {
            assert!((l - expected).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_small_or_ragged_batches() {
        let one = Array2::from_elem((1, 3), 1.0);
        assert!(ContrastiveBatch::new(one.clone(), one.clone(), one).is_err());
        let two = Array2::from_elem((2, 3), 1.0);
        let other = Array2::from_elem((2, 4), 1.0);
        assert!(ContrastiveBatch::new(two.clone(), two, other).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let batch = ContrastiveBatch::random(3, 5, 0);
        assert!(loss_gradient_check(&batch, 0.5).unwrap() < 1e-5);
    }

    #[test]
    fn gradient_orthogonal_to_embedding() {
        let batch = ContrastiveBatch::random(4, 6, 7);
        let (_, g) = contrastive_loss_with_grad(&batch, 0.5).unwrap();
        for (emb, grad) in [
            (&batch.anchors, &g.anchors),
            (&batch.positives, &g.positives),
            (&batch.negatives, &g.negatives),
        ] {
            for (v, gv) in emb.rows().into_iter().zip(grad.rows()) {
                assert!(v.dot(&gv).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn high_temperature_flattens() {
        let batch = ContrastiveBatch::random(3, 4, 1);
        let (out, g) = contrastive_loss_with_grad(&batch, 1e9).unwrap();
        assert!((out.loss - 6f64.ln()).abs() < 1e-8);
        assert!(g.anchors.iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn positive_similarity_lowers_loss() {
        // Only positive 0 moves toward anchor 0; ℓ_0's other logits are unchanged.
        let batch = ContrastiveBatch::random(3, 4, 2);
        let mut moved = batch.clone();
        let a0 = batch.anchors.row(0).to_owned();
        let p0 = batch.positives.row(0).to_owned();
        moved.positives.row_mut(0).assign(&(&p0 * 0.5 + &a0 * 0.5));
        let (c_before, _, _) = cosine_with_grad(batch.anchors.row(0), batch.positives.row(0)).unwrap();
        let (c_after, _, _) = cosine_with_grad(moved.anchors.row(0), moved.positives.row(0)).unwrap();
        assert!(c_after > c_before);
        let l0_before = contrastive_loss(&batch, 0.5).unwrap().per_example[0];
        let l0_after = contrastive_loss(&moved, 0.5).unwrap().per_example[0];
        assert!(l0_after < l0_before);
    }
}
