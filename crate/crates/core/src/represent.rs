//! Prompt templates and sentence embedding extraction.
//!
//! Prompt methods take the final-layer hidden state of the last real token
//! of the rendered prompt; `avg_tokens` averages the hidden states of the raw
//! sentence with no template.

use std::fmt;

use ndarray::Axis;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::{pad_left, Backend, BackendError};
use crate::cache::{CacheError, CacheKey, EmbeddingCache};
use crate::types::{DataError, Demonstration, EmbeddingVector};

#[derive(Debug, Error)]
pub enum RepresentError {
    #[error("text {index} is empty")]
    EmptyText { index: usize },
    #[error("text {index}: {source}")]
    Backend {
        index: usize,
        #[source]
        source: BackendError,
    },
    #[error("text {index}: {source}")]
    Data {
        index: usize,
        #[source]
        source: DataError,
    },
    #[error("a demonstration is only valid with prompt_eol")]
    DemonstrationNotAllowed,
    #[error("batch size must be at least 1")]
    ZeroBatchSize,
    #[error("embedding cache: {0}")]
    Cache(#[from] CacheError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MethodKind {
    AvgTokens,
    PromptLast,
    PromptEol,
}

impl MethodKind {
    pub fn as_str(self) -> &'static str {
        match self {
            MethodKind::AvgTokens => "avg_tokens",
            MethodKind::PromptLast => "prompt_last",
            MethodKind::PromptEol => "prompt_eol",
        }
    }
}

impl std::str::FromStr for MethodKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "avg_tokens" => Ok(MethodKind::AvgTokens),
            "prompt_last" => Ok(MethodKind::PromptLast),
            "prompt_eol" => Ok(MethodKind::PromptEol),
            other => Err(format!(
                "unknown method {other:?} (expected avg_tokens, prompt_last or prompt_eol)"
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepresentationMethod {
    kind: MethodKind,
    demonstration: Option<Demonstration>,
}

impl RepresentationMethod {
    pub fn new(kind: MethodKind, demonstration: Option<Demonstration>) -> Result<Self, RepresentError> {
        if demonstration.is_some() && kind != MethodKind::PromptEol {
            return Err(RepresentError::DemonstrationNotAllowed);
        }
        Ok(Self {
            kind,
            demonstration,
        })
    }

    pub fn avg_tokens() -> Self {
        Self {
            kind: MethodKind::AvgTokens,
            demonstration: None,
        }
    }

    pub fn prompt_last() -> Self {
        Self {
            kind: MethodKind::PromptLast,
            demonstration: None,
        }
    }

    pub fn prompt_eol() -> Self {
        Self {
            kind: MethodKind::PromptEol,
            demonstration: None,
        }
    }

    pub fn prompt_eol_icl(demo: Demonstration) -> Self {
        Self {
            kind: MethodKind::PromptEol,
            demonstration: Some(demo),
        }
    }

    pub fn kind(&self) -> MethodKind {
        self.kind
    }

    pub fn demonstration(&self) -> Option<&Demonstration> {
        self.demonstration.as_ref()
    }

    /// The text fed to the backend for `text`.
    pub fn prompt(&self, text: &str) -> String {
        match (&self.kind, &self.demonstration) {
            (MethodKind::AvgTokens, _) => text.to_string(),
            (MethodKind::PromptLast, _) => render_plain(text),
            (MethodKind::PromptEol, None) => render_prompteol(text),
            (MethodKind::PromptEol, Some(demo)) => render_prompteol_icl(text, demo),
        }
    }

    pub fn demo_id(&self) -> String {
        self.demonstration
            .as_ref()
            .map_or_else(|| "none".to_string(), Demonstration::id)
    }
}

impl fmt::Display for RepresentationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.kind.as_str())?;
        if self.demonstration.is_some() {
            f.write_str("+icl")?;
        }
        Ok(())
    }
}

/// `This sentence : "{text}" means`
pub fn render_plain(text: &str) -> String {
    format!("This sentence : \"{text}\" means")
}

/// `This sentence : "{text}" means in one word:"`
pub fn render_prompteol(text: &str) -> String {
    format!("This sentence : \"{text}\" means in one word:\"")
}

/// Demonstration line (closed with the word and a quote), a newline, then the query prompt.
pub fn render_prompteol_icl(text: &str, demo: &Demonstration) -> String {
    format!(
        "{}{}\"\n{}",
        render_prompteol(demo.sentence()),
        demo.word(),
        render_prompteol(text)
    )
}

/// Masked-LM template for the period ablation, with or without the trailing period.
pub fn render_mask_ablation(text: &str, mask_token: &str, with_period: bool) -> String {
    let period = if with_period { "." } else { "" };
    format!("This sentence : \"{text}\" means {mask_token}{period}")
}

fn text_digest(text: &str) -> String {
    hex::encode(&Sha256::digest(text.as_bytes())[..8])
}

fn source_id(method: &RepresentationMethod, text: &str) -> String {
    format!("{}|{}|{}", text_digest(text), method, method.demo_id())
}

/// Embeds a single text.
pub fn embed(
    method: &RepresentationMethod,
    text: &str,
    backend: &dyn Backend,
) -> Result<EmbeddingVector, RepresentError> {
    let mut out = embed_batch(method, &[text], backend, 1)?;
    Ok(out.remove(0))
}

/// Embeds `texts` in left-padded batches of `batch_size`, preserving order.
pub fn embed_batch<S: AsRef<str>>(
    method: &RepresentationMethod,
    texts: &[S],
    backend: &dyn Backend,
    batch_size: usize,
) -> Result<Vec<EmbeddingVector>, RepresentError> {
    if batch_size == 0 {
        return Err(RepresentError::ZeroBatchSize);
    }
    let mut out = Vec::with_capacity(texts.len());
    for (chunk_idx, chunk) in texts.chunks(batch_size).enumerate() {
        let base = chunk_idx * batch_size;
        let mut seqs = Vec::with_capacity(chunk.len());
        for (k, text) in chunk.iter().enumerate() {
            let text = text.as_ref();
            if text.trim().is_empty() {
                return Err(RepresentError::EmptyText { index: base + k });
            }
            let seq = backend
                .tokenize(&method.prompt(text))
                .map_err(|source| RepresentError::Backend {
                    index: base + k,
                    source,
                })?;
            seqs.push(seq);
        }
        let padded = pad_left(&seqs, backend.pad_token_id());
        let hidden = backend
            .forward_hidden_states(&padded)
            .map_err(|source| RepresentError::Backend {
                index: base,
                source,
            })?;
        for (k, text) in chunk.iter().enumerate() {
            let values = match method.kind() {
                MethodKind::AvgTokens => hidden
                    .real_states(k)
                    .mean_axis(Axis(0))
                    .expect("at least one real token")
                    .to_vec(),
                MethodKind::PromptLast | MethodKind::PromptEol => hidden
                    .last_real_state(k)
                    .expect("at least one real token")
                    .to_vec(),
            };
            let emb = EmbeddingVector::new(values, source_id(method, text.as_ref()))
                .map_err(|source| RepresentError::Data {
                    index: base + k,
                    source,
                })?;
            out.push(emb);
        }
    }
    Ok(out)
}

/// A backend plus batching and an optional on-disk embedding cache.
#[derive(Clone, Copy)]
pub struct Encoder<'a> {
    backend: &'a dyn Backend,
    batch_size: usize,
    cache: Option<&'a EmbeddingCache>,
}

impl<'a> Encoder<'a> {
    pub fn new(backend: &'a dyn Backend, batch_size: usize) -> Self {
        Self {
            backend,
            batch_size: batch_size.max(1),
            cache: None,
        }
    }

    pub fn with_cache(mut self, cache: &'a EmbeddingCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn backend(&self) -> &'a dyn Backend {
        self.backend
    }

    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    /// Same contract as [`embed_batch`]; cache hits return the stored 32-bit values.
    pub fn encode<S: AsRef<str>>(
        &self,
        method: &RepresentationMethod,
        texts: &[S],
    ) -> Result<Vec<EmbeddingVector>, RepresentError> {
        let Some(cache) = self.cache else {
            return embed_batch(method, texts, self.backend, self.batch_size);
        };
        let fingerprint = self.backend.fingerprint();
        let keys: Vec<CacheKey> = texts
            .iter()
            .map(|t| CacheKey::new(&fingerprint, &method.to_string(), &method.demo_id(), t.as_ref()))
            .collect();
        let mut out: Vec<Option<EmbeddingVector>> = Vec::with_capacity(texts.len());
        let mut missing = Vec::new();
        for (i, key) in keys.iter().enumerate() {
            match cache.get(key)? {
                Some(values) => out.push(Some(
                    EmbeddingVector::new(values, source_id(method, texts[i].as_ref()))
                        .map_err(|source| RepresentError::Data { index: i, source })?,
                )),
                None => {
                    out.push(None);
                    missing.push(i);
                }
            }
        }
        if !missing.is_empty() {
            let todo: Vec<&str> = missing.iter().map(|&i| texts[i].as_ref()).collect();
            let fresh = embed_batch(method, &todo, self.backend, self.batch_size).map_err(|e| {
                remap_index(e, |k| missing[k])
            })?;
            for (&i, emb) in missing.iter().zip(fresh) {
                let stored = cache.put(&keys[i], emb.values())?;
                out[i] = Some(
                    EmbeddingVector::new(stored, emb.source_id().to_string())
                        .map_err(|source| RepresentError::Data { index: i, source })?,
                );
            }
        }
        Ok(out.into_iter().map(|e| e.expect("filled")).collect())
    }
}

fn remap_index(err: RepresentError, map: impl Fn(usize) -> usize) -> RepresentError {
    match err {
        RepresentError::EmptyText { index } => RepresentError::EmptyText { index: map(index) },
        RepresentError::Backend { index, source } => RepresentError::Backend {
            index: map(index),
            source,
        },
        RepresentError::Data { index, source } => RepresentError::Data {
            index: map(index),
            source,
        },
        other => other,
    }
}
