use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::loss::{contrastive_loss_with_grad, ContrastiveBatch};
use super::lora::LoraConfig;
use super::TrainError;
use crate::backend::{Backend, Tape, TransformerModel};
use crate::represent::render_prompteol;
use crate::types::{validate_triplets, NliTriplet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub temperature: f64,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub lora: LoraConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            temperature: 0.5,
            learning_rate: 5e-4,
            epochs: 1,
            batch_size: 8,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            lora: LoraConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.temperature > 0.0) {
            return Err(TrainError::InvalidConfig("temperature must be positive".into()));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0) {
            return Err(TrainError::InvalidConfig("learning rate must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub epoch: usize,
    pub step: usize,
    pub batch_size: usize,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingLog {
    pub steps: Vec<StepLog>,
    /// Triplets left out of each epoch because the final batch had fewer than 2.
    pub dropped_per_epoch: usize,
}

impl TrainingLog {
    /// Mean loss over the first and last quarter of the logged steps.
    pub fn quarter_means(&self) -> Option<(f64, f64)> {
        let q = self.steps.len() / 4;
        if q == 0 {
            return None;
        }
        let mean = |s: &[StepLog]| s.iter().map(|l| l.loss).sum::<f64>() / s.len() as f64;
        Some((
            mean(&self.steps[..q]),
            mean(&self.steps[self.steps.len() - q..]),
        ))
    }
}

/// Embeds `texts` with the PromptEOL template, keeping tapes for backprop.
fn forward_group(
    model: &TransformerModel,
    texts: &[&str],
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Vec<(Tape, usize)>), TrainError> {
    let d = model.descriptor().hidden_dim;
    let mut embs = Array2::zeros((texts.len(), d));
    let mut tapes = Vec::with_capacity(texts.len());
    for (i, text) in texts.iter().enumerate() {
        let seq = model.tokenize(&render_prompteol(text))?;
        let (h, tape) = model.forward_with_tape(&seq, Some(rng))?;
        let last = h.nrows() - 1;
        embs.row_mut(i).assign(&h.row(last));
        tapes.push((tape, h.nrows()));
    }
    Ok((embs, tapes))
}

/// Contrastive fine-tuning of the adapters of `model` on NLI triplets.
///
/// Each epoch shuffles the triplets with the configured seed, splits them into
/// batches of `batch_size` (a trailing batch smaller than 2 is dropped) and
/// takes one Adam step per batch. Base weights stay frozen.
pub fn train_cse(
    triplets: &[NliTriplet],
    mut model: TransformerModel,
    config: &TrainConfig,
) -> Result<(TransformerModel, TrainingLog), TrainError> {
    config.validate()?;
    validate_triplets(triplets)?;
    if !model.has_adapters() {
        return Err(TrainError::InvalidConfig(
            "model has no adapters; call apply_adapters first".into(),
        ));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed);
    dropout_rng.set_stream(1);
    let mut adam = Adam::new(config.learning_rate, config.beta1, config.beta2, config.eps);
    let d = model.descriptor().hidden_dim;
    let mut log = TrainingLog::default();
    let mut step = 0;

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..triplets.len()).collect();
        order.shuffle(&mut order_rng);
        log.dropped_per_epoch = 0;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 {
                log.dropped_per_epoch = chunk.len();
                continue;
            }
            let pick = |f: fn(&NliTriplet) -> &str| -> Vec<&str> {
                chunk.iter().map(|&i| f(&triplets[i])).collect()
            };
            let anchors = pick(|t| &t.anchor);
            let positives = pick(|t| &t.positive);
            let negatives = pick(|t| &t.hard_negative);

            let (ea, ta) = forward_group(&model, &anchors, &mut dropout_rng)?;
            let (ep, tp) = forward_group(&model, &positives, &mut dropout_rng)?;
            let (en, tn) = forward_group(&model, &negatives, &mut dropout_rng)?;
            let batch = ContrastiveBatch::new(ea, ep, en)?;
            let (out, grads) = contrastive_loss_with_grad(&batch, config.temperature)
                .map_err(|e| match e {
                    TrainError::NonFiniteLoss { .. } => TrainError::NonFiniteLoss { step: Some(step) },
                    other => other,
                })?;
            if !out.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { step: Some(step) });
            }

            let mut acc = model.zero_grads();
            for (tapes, g) in [(&ta, &grads.anchors), (&tp, &grads.positives), (&tn, &grads.negatives)] {
                for (row, (tape, len)) in tapes.iter().enumerate() {
                    let mut dh = Array2::zeros((*len, d));
                    dh.row_mut(len - 1).assign(&g.row(row));
                    model.backward(tape, &dh, &mut acc);
                }
            }
            let adapters = model.linears_mut().filter_map(|l| l.adapter.as_mut());
            adam.step(adapters, acc.iter().filter(|g| !g.a.is_empty()));

            log.steps.push(StepLog {
                epoch,
                step,
                batch_size: chunk.len(),
                loss: out.loss,
            });
            step += 1;
        }
    }
    Ok((model, log))
}
