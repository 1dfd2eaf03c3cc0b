//! Domain types shared across the pipeline.
//!
//! Every type here validates on construction and is immutable afterwards.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DataError {
    #[error("row {row}: empty sentence")]
    EmptySentence { row: usize },
    #[error("row {row}: score {score} outside [0, 5]")]
    ScoreOutOfRange { row: usize, score: f64 },
    #[error("embedding must have at least one dimension")]
    EmptyEmbedding,
    #[error("embedding component {index} is not finite")]
    NonFiniteEmbedding { index: usize },
    #[error("demonstration word {word:?} must be a single non-empty token")]
    InvalidDemoWord { word: String },
    #[error("demonstration sentence is empty")]
    EmptyDemoSentence,
    #[error("triplet {row}: empty {field}")]
    EmptyTripletField { row: usize, field: &'static str },
    #[error("example {row}: empty text")]
    EmptyExampleText { row: usize },
    #[error("need at least 2 classes, found {found}")]
    TooFewClasses { found: usize },
    #[error("class {class} has no training example")]
    MissingClass { class: usize },
    #[error("report average {stored} does not match recomputed mean {recomputed}")]
    AverageMismatch { stored: f64, recomputed: f64 },
}

/// A sentence embedding. Components are always finite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingVector {
    values: Vec<f64>,
    source_id: String,
}

impl EmbeddingVector {
    pub fn new(values: Vec<f64>, source_id: impl Into<String>) -> Result<Self, DataError> {
        if values.is_empty() {
            return Err(DataError::EmptyEmbedding);
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(DataError::NonFiniteEmbedding { index });
        }
        Ok(Self {
            values,
            source_id: source_id.into(),
        })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn source_id(&self) -> &str {
        &self.source_id
    }

    /// Multiplies every component by `factor`, keeping the source id.
    pub fn scaled(&self, factor: f64) -> Result<Self, DataError> {
        Self::new(
            self.values.iter().map(|v| v * factor).collect(),
            self.source_id.clone(),
        )
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredSentencePair {
    pub sentence_a: String,
    pub sentence_b: String,
    pub gold_score: f64,
}

impl ScoredSentencePair {
    /// Trims both sentences; the score stays on the raw 0..=5 scale.
    pub fn new(sentence_a: &str, sentence_b: &str, gold_score: f64) -> Self {
        Self {
            sentence_a: sentence_a.trim().to_string(),
            sentence_b: sentence_b.trim().to_string(),
            gold_score,
        }
    }

    fn check(&self, row: usize) -> Result<(), DataError> {
        if self.sentence_a.trim().is_empty() || self.sentence_b.trim().is_empty() {
            return Err(DataError::EmptySentence { row });
        }
        if !(0.0..=5.0).contains(&self.gold_score) {
            return Err(DataError::ScoreOutOfRange {
                row,
                score: self.gold_score,
            });
        }
        Ok(())
    }
}

/// A list of scored pairs that passed validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StsDataset {
    pairs: Vec<ScoredSentencePair>,
}

impl StsDataset {
    pub fn pairs(&self) -> &[ScoredSentencePair] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn gold_scores(&self) -> Vec<f64> {
        self.pairs.iter().map(|p| p.gold_score).collect()
    }
}

/// Validates every row; the first offending row is reported and nothing is dropped.
pub fn validate_dataset(rows: Vec<ScoredSentencePair>) -> Result<StsDataset, DataError> {
    for (row, pair) in rows.iter().enumerate() {
        pair.check(row)?;
    }
    Ok(StsDataset { pairs: rows })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NliTriplet {
    pub anchor: String,
    pub positive: String,
    pub hard_negative: String,
}

impl NliTriplet {
    pub fn new(anchor: &str, positive: &str, hard_negative: &str) -> Self {
        Self {
            anchor: anchor.trim().to_string(),
            positive: positive.trim().to_string(),
            hard_negative: hard_negative.trim().to_string(),
        }
    }
}

pub fn validate_triplets(triplets: &[NliTriplet]) -> Result<(), DataError> {
    for (row, t) in triplets.iter().enumerate() {
        for (field, text) in [
            ("anchor", &t.anchor),
            ("positive", &t.positive),
            ("hard_negative", &t.hard_negative),
        ] {
            if text.trim().is_empty() {
                return Err(DataError::EmptyTripletField { row, field });
            }
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemoSource {
    LabeledPairs,
    Dictionary,
}

impl DemoSource {
    pub fn as_str(self) -> &'static str {
        match self {
            DemoSource::LabeledPairs => "labeled_pairs",
            DemoSource::Dictionary => "dictionary",
        }
    }
}

/// An in-context example: a sentence and the single word summarising it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize)]
pub struct Demonstration {
    sentence: String,
    word: String,
    source: DemoSource,
}

impl Demonstration {
    pub fn new(sentence: &str, word: &str, source: DemoSource) -> Result<Self, DataError> {
        let sentence = sentence.trim();
        let word = word.trim();
        if sentence.is_empty() {
            return Err(DataError::EmptyDemoSentence);
        }
        if word.is_empty() || word.chars().any(char::is_whitespace) {
            return Err(DataError::InvalidDemoWord {
                word: word.to_string(),
            });
        }
        Ok(Self {
            sentence: sentence.to_string(),
            word: word.to_string(),
            source,
        })
    }

    pub fn sentence(&self) -> &str {
        &self.sentence
    }

    pub fn word(&self) -> &str {
        &self.word
    }

    pub fn source(&self) -> DemoSource {
        self.source
    }

    /// Stable short identifier derived from the sentence and word.
    pub fn id(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.sentence.as_bytes());
        h.update([0u8]);
        h.update(self.word.as_bytes());
        hex::encode(&h.finalize()[..8])
    }
}

impl<'de> Deserialize<'de> for Demonstration {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            sentence: String,
            word: String,
            source: DemoSource,
        }
        let raw = Raw::deserialize(deserializer)?;
        Demonstration::new(&raw.sentence, &raw.word, raw.source).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub text: String,
    pub label: usize,
}

/// Checks a training split and returns its class count `C` (max label + 1).
pub fn validate_training_split(examples: &[LabeledExample]) -> Result<usize, DataError> {
    for (row, ex) in examples.iter().enumerate() {
        if ex.text.trim().is_empty() {
            return Err(DataError::EmptyExampleText { row });
        }
    }
    let classes = examples.iter().map(|e| e.label + 1).max().unwrap_or(0);
    if classes < 2 {
        return Err(DataError::TooFewClasses { found: classes });
    }
    let mut seen = vec![false; classes];
    for ex in examples {
        seen[ex.label] = true;
    }
    if let Some(class) = seen.iter().position(|s| !s) {
        return Err(DataError::MissingClass { class });
    }
    Ok(classes)
}

/// Scores of one run plus everything needed to reproduce it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub method: String,
    pub demonstration: Option<Demonstration>,
    pub per_task_scores: BTreeMap<String, f64>,
    /// Scores ×100 rounded to two decimals, the usual table convention.
    pub per_task_scores_x100: BTreeMap<String, f64>,
    pub average: f64,
    pub average_x100: f64,
    pub complete: bool,
    pub failures: BTreeMap<String, String>,
    pub notes: Vec<String>,
    pub config_snapshot: serde_json::Value,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub extra: Option<serde_json::Value>,
}

pub fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values
        .into_iter()
        .fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

pub fn round_x100(score: f64) -> f64 {
    (score * 100.0 * 100.0).round() / 100.0
}

impl RunReport {
    pub fn new(
        method: impl Into<String>,
        demonstration: Option<Demonstration>,
        per_task_scores: BTreeMap<String, f64>,
        config_snapshot: serde_json::Value,
        seed: u64,
    ) -> Self {
        let average = mean(per_task_scores.values().copied());
        let per_task_scores_x100 = per_task_scores
            .iter()
            .map(|(k, v)| (k.clone(), round_x100(*v)))
            .collect();
        Self {
            method: method.into(),
            demonstration,
            per_task_scores,
            per_task_scores_x100,
            average,
            average_x100: round_x100(average),
            complete: true,
            failures: BTreeMap::new(),
            notes: Vec::new(),
            config_snapshot,
            seed,
            extra: None,
        }
    }

    pub fn check_average(&self) -> Result<(), DataError> {
        let recomputed = mean(self.per_task_scores.values().copied());
        if (recomputed - self.average).abs() > 1e-9 {
            return Err(DataError::AverageMismatch {
                stored: self.average,
                recomputed,
            });
        }
        Ok(())
    }
}
