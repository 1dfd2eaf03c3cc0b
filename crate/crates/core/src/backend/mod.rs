//! Autoregressive model interface.
//!
//! A backend tokenizes text, runs a batch of left-padded sequences and
//! returns the final-layer hidden state at every position. The bundled
//! [`TransformerModel`] is a small seeded decoder-only transformer that
//! stands in for a real model in tests and desk-scale experiments.

mod reference;

use ndarray::{Array2, Array3, ArrayView1};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use reference::{
    make_reference_model, AdapterGrad, BaseWeight, Linear, ModelConfig, TransformerModel, EOS_ID, PAD_ID,
};
pub(crate) use reference::Tape;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("cannot tokenize empty text")]
    EmptyInput,
    #[error("sequence of {actual} tokens exceeds the limit of {limit}")]
    SequenceTooLong { limit: usize, actual: usize },
    #[error("invalid batch: {0}")]
    InvalidBatch(String),
    #[error("backend does not support generation")]
    GenerationUnsupported,
    #[error("backend failure: {0}")]
    BackendFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackendDescriptor {
    pub name: String,
    pub hidden_dim: usize,
    pub vocab_size: usize,
    pub max_sequence_length: usize,
    pub supports_generation: bool,
    /// False when the backend can only serve one inference call at a time.
    pub concurrent: bool,
}

/// Token ids plus an attention mask (`true` = real token).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    token_ids: Vec<u32>,
    attention_mask: Vec<bool>,
}

impl TokenSequence {
    /// An unpadded sequence; every position is real.
    pub fn new(token_ids: Vec<u32>) -> Result<Self, BackendError> {
        if token_ids.is_empty() {
            return Err(BackendError::EmptyInput);
        }
        let attention_mask = vec![true; token_ids.len()];
        Ok(Self {
            token_ids,
            attention_mask,
        })
    }

    pub fn with_mask(token_ids: Vec<u32>, attention_mask: Vec<bool>) -> Result<Self, BackendError> {
        if token_ids.len() != attention_mask.len() {
            return Err(BackendError::InvalidBatch(format!(
                "{} ids but {} mask entries",
                token_ids.len(),
                attention_mask.len()
            )));
        }
        let first_real = attention_mask
            .iter()
            .position(|m| *m)
            .ok_or_else(|| BackendError::InvalidBatch("mask has no real token".into()))?;
        if attention_mask[first_real..].iter().any(|m| !m) {
            return Err(BackendError::InvalidBatch(
                "padding must precede all real tokens".into(),
            ));
        }
        Ok(Self {
            token_ids,
            attention_mask,
        })
    }

    pub fn token_ids(&self) -> &[u32] {
        &self.token_ids
    }

    pub fn attention_mask(&self) -> &[bool] {
        &self.attention_mask
    }

    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.attention_mask.iter().filter(|m| **m).count()
    }

    /// Ids of the real (unpadded) tokens.
    pub fn real_ids(&self) -> Vec<u32> {
        self.token_ids
            .iter()
            .zip(&self.attention_mask)
            .filter(|(_, m)| **m)
            .map(|(id, _)| *id)
            .collect()
    }

    /// Prepends `n` pad tokens.
    pub fn left_padded(&self, n: usize, pad_id: u32) -> Self {
        let mut token_ids = vec![pad_id; n];
        token_ids.extend_from_slice(&self.token_ids);
        let mut attention_mask = vec![false; n];
        attention_mask.extend_from_slice(&self.attention_mask);
        Self {
            token_ids,
            attention_mask,
        }
    }
}

/// Left-pads every sequence to the longest one in the slice.
pub fn pad_left(seqs: &[TokenSequence], pad_id: u32) -> Vec<TokenSequence> {
    let width = seqs.iter().map(TokenSequence::len).max().unwrap_or(0);
    seqs.iter()
        .map(|s| s.left_padded(width - s.len(), pad_id))
        .collect()
}

/// Final-layer hidden states, `batch × seq_len × hidden_dim`.
#[derive(Debug, Clone)]
pub struct HiddenStateBatch {
    pub states: Array3<f64>,
    pub masks: Vec<Vec<bool>>,
}

impl HiddenStateBatch {
    pub fn batch_size(&self) -> usize {
        self.states.shape()[0]
    }

    pub fn hidden_dim(&self) -> usize {
        self.states.shape()[2]
    }

    /// Index of the last real token of `row`, read from the mask.
    pub fn last_real_index(&self, row: usize) -> Option<usize> {
        self.masks[row].iter().rposition(|m| *m)
    }

    pub fn last_real_state(&self, row: usize) -> Option<ArrayView1<'_, f64>> {
        self.last_real_index(row)
            .map(|t| self.states.slice(ndarray::s![row, t, ..]))
    }

    /// Hidden states of the real tokens of `row`, in order.
    pub fn real_states(&self, row: usize) -> Array2<f64> {
        let idx: Vec<usize> = self.masks[row]
            .iter()
            .enumerate()
            .filter(|(_, m)| **m)
            .map(|(i, _)| i)
            .collect();
        let d = self.hidden_dim();
        let mut out = Array2::zeros((idx.len(), d));
        for (k, t) in idx.into_iter().enumerate() {
            out.row_mut(k)
                .assign(&self.states.slice(ndarray::s![row, t, ..]));
        }
        out
    }
}

pub trait Backend: Send + Sync {
    fn descriptor(&self) -> &BackendDescriptor;

    /// Identifier covering everything that changes outputs (weights, adapters).
    fn fingerprint(&self) -> String {
        self.descriptor().name.clone()
    }

    fn pad_token_id(&self) -> u32;

    fn tokenize(&self, text: &str) -> Result<TokenSequence, BackendError>;

    fn forward_hidden_states(&self, batch: &[TokenSequence])
        -> Result<HiddenStateBatch, BackendError>;

    fn generate_greedy(&self, prompt: &str, max_new_tokens: usize)
        -> Result<String, BackendError>;

    /// Exposes the wrapped transformer for adapter injection, when there is one.
    fn as_transformer(&self) -> Option<&TransformerModel> {
        None
    }
}

/// Checks shape consistency of a batch before it reaches a model.
pub fn check_batch(batch: &[TokenSequence]) -> Result<usize, BackendError> {
    let width = batch
        .first()
        .map(TokenSequence::len)
        .ok_or_else(|| BackendError::InvalidBatch("empty batch".into()))?;
    for (i, seq) in batch.iter().enumerate() {
        if seq.len() != width {
            return Err(BackendError::InvalidBatch(format!(
                "row {i} has length {} but row 0 has {width}",
                seq.len()
            )));
        }
    }
    Ok(width)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_rules() {
        assert!(TokenSequence::with_mask(vec![1, 2], vec![false, true]).is_ok());
        assert!(TokenSequence::with_mask(vec![1, 2], vec![true, false]).is_err());
        assert!(TokenSequence::with_mask(vec![1, 2], vec![false, false]).is_err());
        assert!(TokenSequence::with_mask(vec![1], vec![true, true]).is_err());
    }

    #[test]
    fn pad_left_aligns_right_edge() {
        let a = TokenSequence::new(vec![1, 2, 3]).unwrap();
        let b = TokenSequence::new(vec![4]).unwrap();
        let padded = pad_left(&[a, b], 9);
        assert_eq!(padded[1].token_ids(), &[9, 9, 4]);
        assert_eq!(padded[1].attention_mask(), &[false, false, true]);
        assert_eq!(padded[1].real_ids(), vec![4]);
        assert_eq!(check_batch(&padded), Ok(3));
    }
}
