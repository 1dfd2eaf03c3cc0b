//! Multinomial logistic regression probe on frozen embeddings.
//!
//! Features are standardized with train-split statistics. Training is
//! full-batch proximal gradient descent on mean cross-entropy plus
//! `(l2/2)·‖W‖²`: a gradient step on the cross-entropy followed by the
//! closed-form shrink `W / (1 + lr·l2)`. The bias is not regularized.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::EvalError;
use crate::types::EmbeddingVector;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub l2: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self {
            l2: 1e-2,
            epochs: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogisticClassifier {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
    mean: Array1<f64>,
    scale: Array1<f64>,
}

pub(crate) fn to_matrix(features: &[EmbeddingVector]) -> Result<Array2<f64>, EvalError> {
    let dim = features.first().map_or(0, EmbeddingVector::dim);
    let mut x = Array2::zeros((features.len(), dim));
    for (i, f) in features.iter().enumerate() {
        if f.dim() != dim {
            return Err(EvalError::DimensionMismatch {
                left: dim,
                right: f.dim(),
            });
        }
        x.row_mut(i).assign(&ndarray::ArrayView1::from(f.values()));
    }
    Ok(x)
}

fn softmax_rows(logits: &mut Array2<f64>) {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Objective and gradients at `(w, b)` on standardized features `x`.
///
/// Returns `(loss, dW, db)` with loss = mean cross-entropy + (l2/2)‖W‖².
pub fn loss_and_grad(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: &Array2<f64>,
    labels: &[usize],
    l2: f64,
) -> (f64, Array2<f64>, Array1<f64>) {
    let (ce, dw_ce, db) = cross_entropy_grad(w, b, x, labels);
    let loss = ce + 0.5 * l2 * w.iter().map(|v| v * v).sum::<f64>();
    (loss, dw_ce + &(w * l2), db)
}

fn cross_entropy_grad(
    w: &Array2<f64>,
    b: &Array1<f64>,
    x: &Array2<f64>,
    labels: &[usize],
) -> (f64, Array2<f64>, Array1<f64>) {
    let n = x.nrows() as f64;
    let mut p = x.dot(&w.t()) + b;
    // Stable log-softmax for the loss value.
    let mut ce = 0.0;
    for (row, &y) in p.rows().into_iter().zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |m, v| m.max(*v));
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        ce += lse - row[y];
    }
    softmax_rows(&mut p);
    for (mut row, &y) in p.rows_mut().into_iter().zip(labels) {
        row[y] -= 1.0;
    }
    p /= n;
    let dw = p.t().dot(x);
    let db = p.sum_axis(Axis(0));
    (ce / n, dw, db)
}

/// Trains a `num_classes`-way classifier; labels must be `< num_classes`.
pub fn train_logistic(
    features: &[EmbeddingVector],
    labels: &[usize],
    num_classes: usize,
    config: &LogisticConfig,
) -> Result<LogisticClassifier, EvalError> {
    if num_classes < 2 {
        return Err(EvalError::TooFewClasses(num_classes));
    }
    if features.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            left: features.len(),
            right: labels.len(),
        });
    }
    if features.is_empty() {
        return Err(EvalError::TooFewPoints(0));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(EvalError::LabelOutOfRange {
            label: bad,
            classes: num_classes,
        });
    }
    if config.l2 < 0.0 {
        return Err(EvalError::InvalidHyperparameter("l2 must be non-negative".into()));
    }
    let raw = to_matrix(features)?;
    let mean = raw.mean_axis(Axis(0)).expect("non-empty");
    let scale = raw
        .std_axis(Axis(0), 0.0)
        .mapv(|s| if s > 1e-12 { s } else { 1.0 });
    let x = (&raw - &mean) / &scale;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let init = Normal::new(0.0, 0.01).expect("valid std");
    let mut w = Array2::from_shape_simple_fn((num_classes, x.ncols()), || init.sample(&mut rng));
    let mut b = Array1::zeros(num_classes);
    let shrink = 1.0 / (1.0 + config.lr * config.l2);
    for iteration in 0..config.epochs {
        let (ce, dw, db) = cross_entropy_grad(&w, &b, &x, labels);
        if !ce.is_finite() {
            return Err(EvalError::NonFiniteLoss { iteration });
        }
        w.scaled_add(-config.lr, &dw);
        w *= shrink;
        b.scaled_add(-config.lr, &db);
    }
    Ok(LogisticClassifier {
        weights: w,
        bias: b,
        mean,
        scale,
    })
}

impl LogisticClassifier {
    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn predict_proba(&self, features: &[EmbeddingVector]) -> Result<Array2<f64>, EvalError> {
        let x = (to_matrix(features)? - &self.mean) / &self.scale;
        let mut p = x.dot(&self.weights.t()) + &self.bias;
        softmax_rows(&mut p);
        Ok(p)
    }

    pub fn predict(&self, features: &[EmbeddingVector]) -> Result<Vec<usize>, EvalError> {
        let p = self.predict_proba(features)?;
        Ok(p.rows()
            .into_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                        if v > best.1 {
                            (i, v)
                        } else {
                            best
                        }
                    })
                    .0
            })
            .collect())
    }

    pub fn accuracy(&self, features: &[EmbeddingVector], labels: &[usize]) -> Result<f64, EvalError> {
        if features.is_empty() {
            return Err(EvalError::TooFewPoints(0));
        }
        let pred = self.predict(features)?;
        let hits = pred.iter().zip(labels).filter(|(p, l)| p == l).count();
        Ok(hits as f64 / labels.len() as f64)
    }
}
