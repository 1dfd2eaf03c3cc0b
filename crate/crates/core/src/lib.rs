//! Sentence embeddings from autoregressive language models.
//!
//! A sentence is wrapped in a prompt that asks for its meaning "in one word"
//! and the final-layer hidden state of the last prompt token becomes its
//! embedding. On top of that the crate provides in-context demonstration
//! search, STS and transfer evaluation, and contrastive fine-tuning with
//! low-rank adapters.

pub mod backend;
pub mod cache;
pub mod eval;
pub mod formats;
pub mod icl;
pub mod represent;
pub mod synthetic;
pub mod train;
pub mod types;

pub use backend::{make_reference_model, Backend, BackendDescriptor, BackendError, TransformerModel};
pub use represent::{Encoder, MethodKind, RepresentationMethod};
pub use types::{
    validate_dataset, DemoSource, Demonstration, EmbeddingVector, LabeledExample, NliTriplet,
    RunReport, ScoredSentencePair, StsDataset,
};
