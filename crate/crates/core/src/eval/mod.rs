//! STS and transfer evaluation.
//!
//! STS scores are the Spearman correlation between pair cosines and gold
//! scores, computed over all pairs of a dataset at once. Transfer tasks fit
//! a logistic-regression probe on frozen embeddings using one train/test
//! split; the L2 strength is picked on a held-out slice of the train split.

mod logistic;
mod metrics;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use logistic::{loss_and_grad, train_logistic, LogisticClassifier, LogisticConfig};
pub use metrics::{cosine, pearson, ranks_with_ties, spearman};

use crate::represent::{Encoder, RepresentError, RepresentationMethod};
use crate::types::{validate_training_split, DataError, EmbeddingVector, LabeledExample, StsDataset};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("cosine of a zero vector")]
    ZeroVector,
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("need at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("constant input: correlation undefined")]
    DegenerateInput,
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("label {label} outside 0..{classes}")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),
    #[error("non-finite loss at iteration {iteration}")]
    NonFiniteLoss { iteration: usize },
    #[error("dataset {dataset}, row {row}: {source}")]
    Embedding {
        dataset: String,
        row: usize,
        #[source]
        source: RepresentError,
    },
    #[error("dataset {dataset}: {source}")]
    Task {
        dataset: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Data(#[from] DataError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsTaskResult {
    pub task_name: String,
    pub spearman: f64,
    pub n_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsEvaluation {
    pub results: Vec<StsTaskResult>,
    /// Unweighted mean over datasets.
    pub average: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTaskResult {
    pub task_name: String,
    pub accuracy: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub chosen_l2: f64,
}

/// Spearman between per-pair cosines and gold scores.
pub fn sts_score(
    left: &[EmbeddingVector],
    right: &[EmbeddingVector],
    gold: &[f64],
) -> Result<f64, EvalError> {
    if left.len() != right.len() || left.len() != gold.len() {
        return Err(EvalError::LengthMismatch {
            left: left.len(),
            right: gold.len(),
        });
    }
    let sims = left
        .iter()
        .zip(right)
        .map(|(a, b)| cosine(a.values(), b.values()))
        .collect::<Result<Vec<_>, _>>()?;
    spearman(&sims, gold)
}

fn embed_side(
    name: &str,
    texts: &[&str],
    method: &RepresentationMethod,
    encoder: &Encoder<'_>,
) -> Result<Vec<EmbeddingVector>, EvalError> {
    encoder.encode(method, texts).map_err(|source| {
        let row = match &source {
            RepresentError::EmptyText { index }
            | RepresentError::Backend { index, .. }
            | RepresentError::Data { index, .. } => *index,
            _ => 0,
        };
        EvalError::Embedding {
            dataset: name.to_string(),
            row,
            source,
        }
    })
}

pub fn evaluate_sts_dataset(
    name: &str,
    dataset: &StsDataset,
    method: &RepresentationMethod,
    encoder: &Encoder<'_>,
) -> Result<StsTaskResult, EvalError> {
    let left: Vec<&str> = dataset.pairs().iter().map(|p| p.sentence_a.as_str()).collect();
    let right: Vec<&str> = dataset.pairs().iter().map(|p| p.sentence_b.as_str()).collect();
    let a = embed_side(name, &left, method, encoder)?;
    let b = embed_side(name, &right, method, encoder)?;
    let spearman = sts_score(&a, &b, &dataset.gold_scores()).map_err(|e| EvalError::Task {
        dataset: name.to_string(),
        source: Box::new(e),
    })?;
    Ok(StsTaskResult {
        task_name: name.to_string(),
        spearman,
        n_pairs: dataset.len(),
    })
}

pub fn evaluate_sts(
    datasets: &BTreeMap<String, StsDataset>,
    method: &RepresentationMethod,
    encoder: &Encoder<'_>,
) -> Result<StsEvaluation, EvalError> {
    let results = datasets
        .iter()
        .map(|(name, ds)| evaluate_sts_dataset(name, ds, method, encoder))
        .collect::<Result<Vec<_>, _>>()?;
    let average = crate::types::mean(results.iter().map(|r| r.spearman));
    Ok(StsEvaluation { results, average })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferTask {
    pub name: String,
    pub train: Vec<LabeledExample>,
    pub test: Vec<LabeledExample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferHyperparams {
    pub l2_grid: Vec<f64>,
    pub holdout_fraction: f64,
    pub epochs: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for TransferHyperparams {
    fn default() -> Self {
        Self {
            l2_grid: vec![1e-4, 1e-2, 1.0],
            holdout_fraction: 0.1,
            epochs: 300,
            lr: 0.5,
            seed: 0,
        }
    }
}

fn pick_l2(
    feats: &[EmbeddingVector],
    labels: &[usize],
    classes: usize,
    hp: &TransferHyperparams,
) -> Result<f64, EvalError> {
    if hp.l2_grid.is_empty() {
        return Err(EvalError::InvalidHyperparameter("empty l2 grid".into()));
    }
    let holdout = ((feats.len() as f64) * hp.holdout_fraction).round() as usize;
    if hp.l2_grid.len() == 1 || holdout == 0 || holdout >= feats.len() {
        return Ok(hp.l2_grid[hp.l2_grid.len() / 2]);
    }
    let mut idx: Vec<usize> = (0..feats.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(hp.seed));
    let (held, fit) = idx.split_at(holdout);
    let pick = |ids: &[usize]| -> (Vec<EmbeddingVector>, Vec<usize>) {
        (
            ids.iter().map(|&i| feats[i].clone()).collect(),
            ids.iter().map(|&i| labels[i]).collect(),
        )
    };
    let (fx, fy) = pick(fit);
    let (hx, hy) = pick(held);
    let mut best = (hp.l2_grid[0], f64::NEG_INFINITY);
    for &l2 in &hp.l2_grid {
        let cfg = LogisticConfig {
            l2,
            epochs: hp.epochs,
            lr: hp.lr,
            seed: hp.seed,
        };
        let acc = train_logistic(&fx, &fy, classes, &cfg)?.accuracy(&hx, &hy)?;
        if acc > best.1 {
            best = (l2, acc);
        }
    }
    Ok(best.0)
}

/// Fits a probe on the train split (L2 chosen on a held-out slice) and reports test accuracy.
pub fn evaluate_transfer(
    task: &TransferTask,
    method: &RepresentationMethod,
    encoder: &Encoder<'_>,
    hp: &TransferHyperparams,
) -> Result<TransferTaskResult, EvalError> {
    let classes = validate_training_split(&task.train)?;
    if task.test.is_empty() {
        return Err(EvalError::TooFewPoints(0));
    }
    if let Some(ex) = task.test.iter().find(|e| e.label >= classes) {
        return Err(EvalError::LabelOutOfRange {
            label: ex.label,
            classes,
        });
    }
    let wrap = |e: EvalError| EvalError::Task {
        dataset: task.name.clone(),
        source: Box::new(e),
    };
    let train_texts: Vec<&str> = task.train.iter().map(|e| e.text.as_str()).collect();
    let test_texts: Vec<&str> = task.test.iter().map(|e| e.text.as_str()).collect();
    let train_x = embed_side(&task.name, &train_texts, method, encoder)?;
    let test_x = embed_side(&task.name, &test_texts, method, encoder)?;
    let train_y: Vec<usize> = task.train.iter().map(|e| e.label).collect();
    let test_y: Vec<usize> = task.test.iter().map(|e| e.label).collect();

    let l2 = pick_l2(&train_x, &train_y, classes, hp).map_err(wrap)?;
    let cfg = LogisticConfig {
        l2,
        epochs: hp.epochs,
        lr: hp.lr,
        seed: hp.seed,
    };
    let clf = train_logistic(&train_x, &train_y, classes, &cfg).map_err(wrap)?;
    let accuracy = clf.accuracy(&test_x, &test_y).map_err(wrap)?;
    Ok(TransferTaskResult {
        task_name: task.name.clone(),
        accuracy,
        n_train: task.train.len(),
        n_test: task.test.len(),
        chosen_l2: l2,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::make_reference_model;
    use crate::types::{validate_dataset, ScoredSentencePair};

    fn planted_embeddings(n: usize) -> (Vec<EmbeddingVector>, Vec<EmbeddingVector>, Vec<f64>) {
        // Pair i is at angle θ_i; gold is a decreasing function of θ_i.
        let mut a = Vec::new();
        let mut b = Vec::new();
        let mut gold = Vec::new();
        for i in 0..n {
            let theta = 0.05 + 1.4 * i as f64 / n as f64;
            a.push(EmbeddingVector::new(vec![1.0, 0.0, 0.0], "a").unwrap());
            b.push(EmbeddingVector::new(vec![theta.cos(), theta.sin(), 0.0], "b").unwrap());
            gold.push(5.0 * (1.0 - theta / 1.5));
        }
        (a, b, gold)
    }

    #[test]
    fn planted_similarity_gives_perfect_spearman() {
        let (a, b, gold) = planted_embeddings(25);
        assert_eq!(sts_score(&a, &b, &gold).unwrap(), 1.0);
    }

    #[test]
    fn pair_permutation_leaves_score_unchanged() {
        let (mut a, mut b, mut gold) = planted_embeddings(10);
        gold[3] = 4.9; // break the perfect ordering
        let base = sts_score(&a, &b, &gold).unwrap();
        a.reverse();
        b.reverse();
        gold.reverse();
        assert_eq!(sts_score(&a, &b, &gold).unwrap(), base);
    }

    #[test]
    fn single_dataset_average() {
        let m = make_reference_model(0);
        let ds = validate_dataset(vec![
            ScoredSentencePair::new("a cat", "a kitten", 4.5),
            ScoredSentencePair::new("a car", "the sea", 0.5),
            ScoredSentencePair::new("rain", "storm", 3.0),
        ])
        .unwrap();
        let sets: BTreeMap<_, _> = [("toy".to_string(), ds)].into_iter().collect();
        let enc = Encoder::new(&m, 4);
        let out = evaluate_sts(&sets, &RepresentationMethod::prompt_eol(), &enc).unwrap();
        assert_eq!(out.average, out.results[0].spearman);
        assert_eq!(out.results[0].n_pairs, 3);
    }

    #[test]
    fn transfer_memorization_and_single_class_test() {
        let m = make_reference_model(0);
        let mut train = Vec::new();
        for i in 0..20 {
            train.push(LabeledExample {
                text: format!("{} good great fine", "a".repeat(i % 5 + 1)),
                label: 0,
            });
            train.push(LabeledExample {
                text: format!("{} zzz qqq xxx", "z".repeat(i % 5 + 1)),
                label: 1,
            });
        }
        let task = TransferTask {
            name: "toy".into(),
            train: train.clone(),
            test: train.clone(),
        };
        let enc = Encoder::new(&m, 8);
        let hp = TransferHyperparams::default();
        let r = evaluate_transfer(&task, &RepresentationMethod::avg_tokens(), &enc, &hp).unwrap();
        assert!(r.accuracy >= 0.99, "{r:?}");
        let single = TransferTask {
            test: train.iter().filter(|e| e.label == 1).cloned().collect(),
            ..task
        };
        let r = evaluate_transfer(&single, &RepresentationMethod::avg_tokens(), &enc, &hp).unwrap();
        assert!((0.0..=1.0).contains(&r.accuracy));
    }
}
