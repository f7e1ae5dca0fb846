//! JSON dump of trained rerank parameters.

use narco_core::rerank::{FusionParams, LossPoint, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;

pub const PARAMS_FORMAT: &str = "narco-rerank/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamsFile {
    pub format: String,
    pub train: TrainConfig,
    /// Embeddings the head was trained on; reranking must use the same.
    pub embedding: EmbeddingConfig,
    pub final_loss: Option<f64>,
    pub params: FusionParams,
}

impl ParamsFile {
    pub fn new(params: FusionParams, train: TrainConfig, embedding: EmbeddingConfig, curve: &[LossPoint]) -> Self {
        ParamsFile {
            format: PARAMS_FORMAT.into(),
            train,
            embedding,
            final_loss: curve.last().map(|p| p.loss),
            params,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        match value.get("format").and_then(|f| f.as_str()) {
            Some(PARAMS_FORMAT) => {}
            Some(other) => {
                return Err(format!(
                    "unsupported params format {other:?}, expected {PARAMS_FORMAT:?}"
                ))
            }
            None => return Err("missing field `format`".into()),
        }
        let file: ParamsFile = serde_json::from_value(value).map_err(|e| e.to_string())?;
        file.params.validate().map_err(|e| e.to_string())?;
        Ok(file)
    }
}
