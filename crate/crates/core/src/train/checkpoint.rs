//! Adapter checkpoints.
//!
//! A checkpoint is a JSON document:
//!
//! ```text
//! {
//!   "format": "sentemb-lora/1",
//!   "base_model": { "kind": "reference", "seed": 0, "config": { ... } },
//!   "lora": { "rank": 64, "alpha": 16.0, "dropout": 0.05, "quantize_base": false },
//!   "layers": [ { "name": "layers.0.attn.q", "rows": 64, "cols": 64,
//!                 "rank": 64, "alpha": 16.0, "a": [...], "b": [...] }, ... ],
//!   "config_snapshot": { ... }
//! }
//! ```
//!
//! `a` is `rank × cols` and `b` is `rows × rank`, both row-major.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::lora::{apply_adapters, LoraConfig};
use super::TrainError;
use crate::backend::{ModelConfig, TransformerModel};

pub const CHECKPOINT_FORMAT: &str = "sentemb-lora/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaseModelRef {
    pub kind: String,
    pub seed: u64,
    pub config: ModelConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterLayer {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub rank: usize,
    pub alpha: f64,
    pub a: Vec<f64>,
    pub b: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub format: String,
    pub base_model: BaseModelRef,
    pub lora: LoraConfig,
    pub layers: Vec<AdapterLayer>,
    pub config_snapshot: serde_json::Value,
}

fn bad(field: impl Into<String>, reason: impl Into<String>) -> TrainError {
    TrainError::Checkpoint {
        field: field.into(),
        reason: reason.into(),
    }
}

impl AdapterCheckpoint {
    pub fn from_model(
        model: &TransformerModel,
        lora: &LoraConfig,
        config_snapshot: serde_json::Value,
    ) -> Self {
        let layers = model
            .linears()
            .filter_map(|l| {
                let ad = l.adapter.as_ref()?;
                let (rows, cols) = l.shape();
                Some(AdapterLayer {
                    name: l.name.clone(),
                    rows,
                    cols,
                    rank: ad.rank(),
                    alpha: ad.alpha,
                    a: ad.a.iter().copied().collect(),
                    b: ad.b.iter().copied().collect(),
                })
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            base_model: BaseModelRef {
                kind: "reference".into(),
                seed: model.seed(),
                config: model.config().clone(),
            },
            lora: lora.clone(),
            layers,
            config_snapshot,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, TrainError> {
        let ckpt: Self = serde_json::from_str(text).map_err(|e| bad("<document>", e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        std::fs::write(path, self.to_json()).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if self.format != CHECKPOINT_FORMAT {
            return Err(bad("format", format!("expected {CHECKPOINT_FORMAT:?}, found {:?}", self.format)));
        }
        if self.base_model.kind != "reference" {
            return Err(bad("base_model.kind", format!("unsupported kind {:?}", self.base_model.kind)));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let field = |f: &str| format!("layers[{i}].{f}");
            if layer.rank != self.lora.rank {
                return Err(bad(field("rank"), format!("{} differs from lora.rank {}", layer.rank, self.lora.rank)));
            }
            if layer.a.len() != layer.rank * layer.cols {
                return Err(bad(
                    field("a"),
                    format!("expected {} values, found {}", layer.rank * layer.cols, layer.a.len()),
                ));
            }
            if layer.b.len() != layer.rows * layer.rank {
                return Err(bad(
                    field("b"),
                    format!("expected {} values, found {}", layer.rows * layer.rank, layer.b.len()),
                ));
            }
            if layer.a.iter().chain(&layer.b).any(|v| !v.is_finite()) {
                return Err(bad(field("a/b"), "non-finite value"));
            }
        }
        Ok(())
    }

    /// Rebuilds the adapted model: base weights from the seed, adapters from the file.
    pub fn restore(&self) -> Result<TransformerModel, TrainError> {
        self.validate()?;
        let base = TransformerModel::new(self.base_model.config.clone(), self.base_model.seed);
        let mut model = apply_adapters(&base, &self.lora, 0)?;
        let count = model.linears().count();
        if count != self.layers.len() {
            return Err(bad("layers", format!("expected {count} layers, found {}", self.layers.len())));
        }
        for (i, (linear, layer)) in model.linears_mut().zip(&self.layers).enumerate() {
            if linear.name != layer.name {
                return Err(bad(format!("layers[{i}].name"), format!("expected {:?}, found {:?}", linear.name, layer.name)));
            }
            if linear.shape() != (layer.rows, layer.cols) {
                return Err(bad(format!("layers[{i}].rows"), "shape does not match the base model"));
            }
            let ad = linear.adapter.as_mut().expect("adapters applied");
            ad.a = Array2::from_shape_vec((layer.rank, layer.cols), layer.a.clone()).expect("validated length");
            ad.b = Array2::from_shape_vec((layer.rows, layer.rank), layer.b.clone()).expect("validated length");
            ad.alpha = layer.alpha;
        }
        Ok(model)
    }
}
