//! Demonstration sets and the brute-force search for the best demonstration.
//!
//! Every candidate is scored by the dev-set Spearman it yields when prepended
//! to each PromptEOL prompt. The no-demonstration baseline is always scored
//! first. Ties go to the earliest demonstration in set order.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::{Backend, BackendError};
use crate::eval::{evaluate_sts_dataset, EvalError};
use crate::represent::{render_prompteol, Encoder, RepresentationMethod};
use crate::types::{DataError, DemoSource, Demonstration, StsDataset};

/// Tokens generated when asking a labeler for a word.
pub const LABEL_MAX_NEW_TOKENS: usize = 8;

#[derive(Debug, Error)]
pub enum IclError {
    #[error("dictionary entry {index}: {reason}")]
    MalformedEntry { index: usize, reason: String },
    #[error("labeler does not support generation")]
    GenerationUnsupported,
    #[error("labeling failed for {} sentence(s): {}", .0.len(), summarize(.0))]
    LabelingFailed(Vec<SkippedSentence>),
    #[error("demonstration set is empty")]
    EmptyDemoSet,
    #[error("dev set needs at least 2 pairs, got {0}")]
    DevSetTooSmall(usize),
    #[error("{}: {source}", .index.map_or("baseline".to_string(), |i| format!("demonstration {i}")))]
    Demo {
        index: Option<usize>,
        #[source]
        source: EvalError,
    },
    #[error("histogram needs at least one bin")]
    ZeroBins,
}

fn summarize(items: &[SkippedSentence]) -> String {
    items
        .iter()
        .take(5)
        .map(|s| format!("#{}: {}", s.index, s.reason))
        .collect::<Vec<_>>()
        .join("; ")
}

/// Ordered, duplicate-free demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DemonstrationSet {
    demos: Vec<Demonstration>,
}

impl DemonstrationSet {
    /// Keeps the first occurrence of each `(sentence, word)`; returns the number dropped.
    pub fn from_demos(demos: impl IntoIterator<Item = Demonstration>) -> (Self, usize) {
        let mut seen = HashSet::new();
        let mut kept = Vec::new();
        let mut dropped = 0;
        for d in demos {
            if seen.insert((d.sentence().to_string(), d.word().to_string())) {
                kept.push(d);
            } else {
                dropped += 1;
            }
        }
        (Self { demos: kept }, dropped)
    }

    pub fn demos(&self) -> &[Demonstration] {
        &self.demos
    }

    pub fn len(&self) -> usize {
        self.demos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.demos.is_empty()
    }

    pub fn provenance(&self) -> BTreeMap<DemoSource, usize> {
        let mut counts = BTreeMap::new();
        for d in &self.demos {
            *counts.entry(d.source()).or_insert(0) += 1;
        }
        counts
    }
}

/// `(word, definition)` pairs to dictionary demonstrations.
pub fn build_from_dictionary(entries: &[(String, String)]) -> Result<Vec<Demonstration>, IclError> {
    entries
        .iter()
        .enumerate()
        .map(|(index, (word, definition))| {
            Demonstration::new(definition, word, DemoSource::Dictionary).map_err(|e| {
                IclError::MalformedEntry {
                    index,
                    reason: e.to_string(),
                }
            })
        })
        .collect()
}

/// The word in labeler output: leading whitespace skipped, then everything
/// up to the first `"` or whitespace.
pub fn parse_label_word(output: &str) -> Option<&str> {
    let rest = output.trim_start();
    let end = rest
        .find(|c: char| c == '"' || c.is_whitespace())
        .unwrap_or(rest.len());
    let word = &rest[..end];
    (!word.is_empty()).then_some(word)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkippedSentence {
    pub index: usize,
    pub sentence: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LabelingOutcome {
    pub demos: Vec<Demonstration>,
    pub skipped: Vec<SkippedSentence>,
}

/// Asks `labeler` for a one-word summary of each sentence.
///
/// Outputs with no usable word are skipped and reported; backend errors abort
/// with every failure collected.
pub fn label_sentences<S: AsRef<str>>(
    sentences: &[S],
    labeler: &dyn Backend,
) -> Result<LabelingOutcome, IclError> {
    if !labeler.descriptor().supports_generation {
        return Err(IclError::GenerationUnsupported);
    }
    let mut outcome = LabelingOutcome::default();
    let mut failures = Vec::new();
    for (index, sentence) in sentences.iter().enumerate() {
        let sentence = sentence.as_ref().trim();
        let skip = |reason: String| SkippedSentence {
            index,
            sentence: sentence.to_string(),
            reason,
        };
        if sentence.is_empty() {
            outcome.skipped.push(skip("empty sentence".into()));
            continue;
        }
        let output = match labeler.generate_greedy(&render_prompteol(sentence), LABEL_MAX_NEW_TOKENS) {
            Ok(o) => o,
            Err(BackendError::GenerationUnsupported) => return Err(IclError::GenerationUnsupported),
            Err(e) => {
                failures.push(skip(e.to_string()));
                continue;
            }
        };
        match parse_label_word(&output)
            .map(|w| Demonstration::new(sentence, w, DemoSource::LabeledPairs))
        {
            Some(Ok(demo)) => outcome.demos.push(demo),
            Some(Err(DataError::InvalidDemoWord { word })) => {
                outcome.skipped.push(skip(format!("multiword label {word:?}")))
            }
            Some(Err(e)) => outcome.skipped.push(skip(e.to_string())),
            None => outcome.skipped.push(skip(format!("no word in output {output:?}"))),
        }
    }
    if failures.is_empty() {
        Ok(outcome)
    } else {
        Err(IclError::LabelingFailed(failures))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemoScore {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_index: usize,
    pub best_demo: Demonstration,
    pub best_score: f64,
    pub all_scores: Vec<DemoScore>,
    pub baseline_score: f64,
    /// False when no demonstration beats the baseline.
    pub improves_on_baseline: bool,
}

/// Index of the first maximum.
pub fn best_index(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    best.map(|(i, _)| i)
}

pub fn search_demonstration(
    demo_set: &DemonstrationSet,
    dev_set: &StsDataset,
    encoder: &Encoder<'_>,
) -> Result<SearchResult, IclError> {
    if demo_set.is_empty() {
        return Err(IclError::EmptyDemoSet);
    }
    if dev_set.len() < 2 {
        return Err(IclError::DevSetTooSmall(dev_set.len()));
    }
    let score = |method: RepresentationMethod, index: Option<usize>| {
        evaluate_sts_dataset("dev", dev_set, &method, encoder)
            .map(|r| r.spearman)
            .map_err(|source| IclError::Demo { index, source })
    };
    let baseline_score = score(RepresentationMethod::prompt_eol(), None)?;
    let mut all_scores = Vec::with_capacity(demo_set.len());
    for (index, demo) in demo_set.demos().iter().enumerate() {
        let s = score(RepresentationMethod::prompt_eol_icl(demo.clone()), Some(index))?;
        all_scores.push(DemoScore { index, score: s });
    }
    let values: Vec<f64> = all_scores.iter().map(|d| d.score).collect();
    let best = best_index(&values).expect("non-empty");
    Ok(SearchResult {
        best_index: best,
        best_demo: demo_set.demos()[best].clone(),
        best_score: values[best],
        all_scores,
        baseline_score,
        improves_on_baseline: values[best] > baseline_score,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreHistogram {
    /// `bins + 1` edges spanning every demo score and the baseline.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub baseline: f64,
    pub fraction_above_baseline: f64,
}

pub fn score_histogram(result: &SearchResult, bins: usize) -> Result<ScoreHistogram, IclError> {
    if bins == 0 {
        return Err(IclError::ZeroBins);
    }
    let scores: Vec<f64> = result.all_scores.iter().map(|d| d.score).collect();
    let lo = scores.iter().copied().fold(result.baseline_score, f64::min);
    let hi = scores.iter().copied().fold(result.baseline_score, f64::max);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|i| lo + width * i as f64).collect();
    let mut counts = vec![0; bins];
    for &s in &scores {
        let bin = if width > 0.0 {
            (((s - lo) / width) as usize).min(bins - 1)
        } else {
            0
        };
        counts[bin] += 1;
    }
    let above = scores.iter().filter(|&&s| s > result.baseline_score).count();
    Ok(ScoreHistogram {
        edges,
        counts,
        baseline: result.baseline_score,
        fraction_above_baseline: if scores.is_empty() {
            0.0
        } else {
            above as f64 / scores.len() as f64
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::{make_reference_model, BackendDescriptor, HiddenStateBatch, TokenSequence};

    struct Scripted {
        descriptor: BackendDescriptor,
        reply: String,
    }

    impl Scripted {
        fn new(reply: &str, generation: bool) -> Self {
            Self {
                descriptor: BackendDescriptor {
                    name: "scripted".into(),
                    hidden_dim: 1,
                    vocab_size: 256,
                    max_sequence_length: 64,
                    supports_generation: generation,
                    concurrent: true,
                },
                reply: reply.into(),
            }
        }
    }

    impl Backend for Scripted {
        fn descriptor(&self) -> &BackendDescriptor {
            &self.descriptor
        }
        fn pad_token_id(&self) -> u32 {
            0
        }
        fn tokenize(&self, text: &str) -> Result<TokenSequence, BackendError> {
            TokenSequence::new(text.bytes().map(u32::from).collect())
        }
        fn forward_hidden_states(&self, _: &[TokenSequence]) -> Result<HiddenStateBatch, BackendError> {
            Err(BackendError::BackendFailure("not a model".into()))
        }
        fn generate_greedy(&self, _: &str, _: usize) -> Result<String, BackendError> {
            if self.descriptor.supports_generation {
                Ok(self.reply.clone())
            } else {
                Err(BackendError::GenerationUnsupported)
            }
        }
    }

    #[test]
    fn dictionary_entries() {
        let demos = build_from_dictionary(&[("venison".into(), "meat from a deer.".into())]).unwrap();
        assert_eq!(demos[0].sentence(), "meat from a deer.");
        assert_eq!(demos[0].word(), "venison");
        assert_eq!(demos[0].source(), DemoSource::Dictionary);
        assert!(matches!(
            build_from_dictionary(&[("ok".into(), "fine".into()), ("ice cream".into(), "cold".into())]),
            Err(IclError::MalformedEntry { index: 1, .. })
        ));
        assert!(build_from_dictionary(&[]).unwrap().is_empty());
    }

    #[test]
    fn label_parsing() {
        assert_eq!(parse_label_word("Smoking\""), Some("Smoking"));
        assert_eq!(parse_label_word("  Rain\" and more"), Some("Rain"));
        assert_eq!(parse_label_word("Horseback-riding stuff"), Some("Horseback-riding"));
        assert_eq!(parse_label_word("   \n"), None);
        assert_eq!(parse_label_word("\"x"), None);
    }

    #[test]
    fn labeling_with_scripted_labelers() {
        let out = label_sentences(&["A man is smoking."], &Scripted::new("Smoking\"", true)).unwrap();
        assert_eq!(out.demos[0].word(), "Smoking");
        assert_eq!(out.demos[0].source(), DemoSource::LabeledPairs);
        let out = label_sentences(&["A man is smoking."], &Scripted::new("   ", true)).unwrap();
        assert!(out.demos.is_empty());
        assert_eq!(out.skipped[0].index, 0);
        assert!(matches!(
            label_sentences(&["x"], &Scripted::new("", false)),
            Err(IclError::GenerationUnsupported)
        ));
    }

    #[test]
    fn reference_model_can_label() {
        let m = make_reference_model(0);
        let out = label_sentences(&["It rains.", "A dog barks."], &m).unwrap();
        assert_eq!(out.demos.len() + out.skipped.len(), 2);
    }

    #[test]
    fn dedup_and_provenance() {
        let d = |s: &str, w: &str, src| Demonstration::new(s, w, src).unwrap();
        let (set, dropped) = DemonstrationSet::from_demos([
            d("a", "A", DemoSource::Dictionary),
            d("b", "B", DemoSource::LabeledPairs),
            d("a", "A", DemoSource::LabeledPairs),
        ]);
        assert_eq!(dropped, 1);
        assert_eq!(set.len(), 2);
        assert_eq!(set.provenance()[&DemoSource::Dictionary], 1);
        assert_eq!(set.provenance()[&DemoSource::LabeledPairs], 1);
    }

    #[test]
    fn argmax_prefers_first() {
        assert_eq!(best_index(&[0.1, 0.5, 0.5, 0.2]), Some(1));
        assert_eq!(best_index(&[0.3]), Some(0));
        assert_eq!(best_index(&[]), None);
    }

    fn result_with(scores: &[f64], baseline: f64) -> SearchResult {
        let demo = Demonstration::new("s", "w", DemoSource::Dictionary).unwrap();
        SearchResult {
            best_index: 0,
            best_demo: demo,
            best_score: scores[0],
            all_scores: scores
                .iter()
                .enumerate()
                .map(|(index, &score)| DemoScore { index, score })
                .collect(),
            baseline_score: baseline,
            improves_on_baseline: false,
        }
    }

    #[test]
    fn histogram_counts() {
        let h = score_histogram(&result_with(&[0.2, 0.2, 0.2], 0.2), 5).unwrap();
        assert_eq!(h.counts.iter().filter(|c| **c > 0).count(), 1);
        assert_eq!(h.counts.iter().sum::<usize>(), 3);
        let h = score_histogram(&result_with(&[0.1, 0.4, 0.7, 0.9], 0.5), 4).unwrap();
        assert_eq!(h.counts.iter().sum::<usize>(), 4);
        assert_eq!(h.edges.len(), 5);
        assert_eq!(h.fraction_above_baseline, 0.5);
        assert!(score_histogram(&result_with(&[0.1], 0.0), 0).is_err());
    }
}
