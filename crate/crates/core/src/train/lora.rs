//! Low-rank adapters.

use ndarray::Array2;
use rand::Rng;
use rand_distr::Uniform;
use serde::{Deserialize, Serialize};

use crate::backend::{Backend, BaseWeight, TransformerModel};
use crate::train::quant::quantize_blockwise;
use crate::train::TrainError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    /// Store frozen base weights as 4-bit blocks, dequantized on every use.
    pub quantize_base: bool,
}

impl Default for LoraConfig {
    fn default() -> Self {
        Self {
            rank: 64,
            alpha: 16.0,
            dropout: 0.05,
            quantize_base: false,
        }
    }
}

/// Trainable factors for one `m × n` weight: `A` is `r × n`, `B` is `m × r`.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: Array2<f64>,
    pub b: Array2<f64>,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    /// `B` starts at zero so the adapter contributes nothing until trained.
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, config: &LoraConfig, rng: &mut R) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let dist = Uniform::new_inclusive(-bound, bound);
        let a = Array2::from_shape_simple_fn((config.rank, in_dim), || rng.sample(dist));
        Self {
            a,
            b: Array2::zeros((out_dim, config.rank)),
            alpha: config.alpha,
            dropout: config.dropout,
        }
    }

    pub fn rank(&self) -> usize {
        self.a.nrows()
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank() as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.len() + self.b.len()
    }

    /// `(α/r)·B·A`, the dense weight delta.
    pub fn delta(&self) -> Array2<f64> {
        self.b.dot(&self.a) * self.scale()
    }
}

/// Wraps every linear layer of the backend's transformer with a fresh adapter.
pub fn apply_adapters(
    backend: &dyn Backend,
    config: &LoraConfig,
    seed: u64,
) -> Result<TransformerModel, TrainError> {
    use rand::SeedableRng;
    let base = backend
        .as_transformer()
        .ok_or_else(|| TrainError::AdapterUnsupported(backend.descriptor().name.clone()))?;
    if config.rank == 0 {
        return Err(TrainError::InvalidConfig("adapter rank must be positive".into()));
    }
    if !(0.0..1.0).contains(&config.dropout) {
        return Err(TrainError::InvalidConfig("dropout must lie in [0, 1)".into()));
    }
    let mut model = base.clone();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    for linear in model.linears_mut() {
        let (m, n) = linear.shape();
        if config.quantize_base {
            if let BaseWeight::Dense(w) = &linear.weight {
                let values: Vec<f64> = w.iter().copied().collect();
                linear.weight = BaseWeight::Quantized(quantize_blockwise(&values, &[m, n]));
            }
        }
        linear.adapter = Some(LoraAdapter::init(m, n, config, &mut rng));
    }
    Ok(model)
}

/// Folds adapters into dense base weights and drops them.
pub fn merge_adapters(model: &TransformerModel) -> TransformerModel {
    let mut merged = model.clone();
    for linear in merged.linears_mut() {
        let mut w = linear.weight.dense();
        if let Some(adapter) = linear.adapter.take() {
            w = w + adapter.delta();
        }
        linear.weight = BaseWeight::Dense(w);
    }
    merged
}

/// Σ r·(m + n) over adapted layers.
pub fn trainable_parameter_count(model: &TransformerModel) -> usize {
    model
        .linears()
        .filter_map(|l| l.adapter.as_ref())
        .map(LoraAdapter::param_count)
        .sum()
}
