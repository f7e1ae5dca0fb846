//! Embedding providers selectable from configuration.

use narco_core::retrieval::{EmbeddingProvider, HashingEmbedder, MockEmbedder, RetrievalError};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    /// Seeded pseudo-random vectors per text.
    Mock,
    /// Feature-hashed bag of words; lexical overlap gives similarity.
    #[default]
    Hashing,
    /// OpenAI-style `/embeddings` endpoint.
    Http,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingConfig {
    pub kind: EmbeddingKind,
    pub dim: usize,
    pub seed: u64,
    pub endpoint: String,
    pub model: String,
    pub credential_env: String,
    pub timeout_secs: f64,
    pub retry_budget: u32,
}

impl Default for EmbeddingConfig {
    fn default() -> Self {
        EmbeddingConfig {
            kind: EmbeddingKind::Hashing,
            dim: 256,
            seed: 0,
            endpoint: "https://api.openai.com/v1/embeddings".into(),
            model: "text-embedding-3-small".into(),
            credential_env: "OPENAI_API_KEY".into(),
            timeout_secs: 60.0,
            retry_budget: 3,
        }
    }
}

pub struct HttpEmbedder {
    config: EmbeddingConfig,
    agent: ureq::Agent,
}

impl HttpEmbedder {
    pub fn new(config: EmbeddingConfig) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(std::time::Duration::from_secs_f64(config.timeout_secs.max(0.001))))
            .build()
            .into();
        HttpEmbedder { config, agent }
    }

    fn attempt(&self, key: &str, texts: &[&str]) -> Result<Vec<Vec<f64>>, String> {
        let payload = serde_json::json!({"model": self.config.model, "input": texts});
        let body: serde_json::Value = self
            .agent
            .post(&self.config.endpoint)
            .header("Authorization", &format!("Bearer {key}"))
            .send_json(&payload)
            .map_err(|e| e.to_string())?
            .body_mut()
            .read_json()
            .map_err(|e| e.to_string())?;
        let data = body
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or("response has no data array")?;
        let mut rows: Vec<(u64, Vec<f64>)> = Vec::with_capacity(data.len());
        for (pos, item) in data.iter().enumerate() {
            let index = item.get("index").and_then(|i| i.as_u64()).unwrap_or(pos as u64);
            let vector = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or("item has no embedding")?
                .iter()
                .map(|v| v.as_f64().ok_or("non-numeric embedding entry"))
                .collect::<Result<Vec<f64>, _>>()?;
            rows.push((index, vector));
        }
        rows.sort_by_key(|r| r.0);
        Ok(rows.into_iter().map(|r| r.1).collect())
    }
}

impl EmbeddingProvider for HttpEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        let key = std::env::var(&self.config.credential_env).map_err(|_| {
            RetrievalError::Provider(format!(
                "environment variable {} is not set",
                self.config.credential_env
            ))
        })?;
        let mut last = String::new();
        for attempt in 0..=self.config.retry_budget {
            if attempt > 0 {
                std::thread::sleep(std::time::Duration::from_millis(250u64 << attempt.min(8)));
            }
            match self.attempt(&key, texts) {
                Ok(v) => return Ok(v),
                Err(e) => last = e,
            }
        }
        Err(RetrievalError::Provider(last))
    }
}

pub fn provider(config: &EmbeddingConfig) -> Result<Box<dyn EmbeddingProvider + Send + Sync>, String> {
    if config.dim == 0 && config.kind != EmbeddingKind::Http {
        return Err("embedding.dim must be positive".into());
    }
    Ok(match config.kind {
        EmbeddingKind::Mock => Box::new(MockEmbedder::new(config.dim, config.seed)),
        EmbeddingKind::Hashing => Box::new(HashingEmbedder { dim: config.dim }),
        EmbeddingKind::Http => Box::new(HttpEmbedder::new(config.clone())),
    })
}
