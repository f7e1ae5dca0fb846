//! Declarative run configuration. Command-line flags override file values.

use std::path::{Path, PathBuf};

use narco_core::chunking::DEFAULT_MAX_WORDS;
use narco_core::edge::{EdgeConfig, DEFAULT_CAP, DEFAULT_WINDOW};
use narco_core::recap::RecapConfig;
use narco_core::rerank::{TrainConfig, DEFAULT_TOP_N};
use narco_core::retrieval::DEFAULT_LAMBDA;
use serde::{Deserialize, Serialize};

use crate::embedding::EmbeddingConfig;
use crate::gateway::ProviderConfig;

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    /// Plain-text document, chunked into nodes.
    pub input: Option<PathBuf>,
    /// Pre-chunked passages as JSON lines `{id, text}`.
    pub corpus: Option<PathBuf>,
    pub graph: Option<PathBuf>,
    pub queries: Option<PathBuf>,
    pub questions: Option<PathBuf>,
    pub replies: Option<PathBuf>,
    pub recap_instance: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub pairs: Option<PathBuf>,
    pub checkpoints: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BuildSection {
    pub window: usize,
    pub cap: usize,
    pub max_words: usize,
    pub parallelism: usize,
    pub generation_model: String,
    pub verification_model: String,
    pub max_output: u32,
}

impl Default for BuildSection {
    fn default() -> Self {
        let edge = EdgeConfig::default();
        BuildSection {
            window: DEFAULT_WINDOW,
            cap: DEFAULT_CAP,
            max_words: DEFAULT_MAX_WORDS,
            parallelism: 4,
            generation_model: edge.generation_model,
            verification_model: edge.verification_model,
            max_output: edge.max_output,
        }
    }
}

impl BuildSection {
    pub fn edge_config(&self) -> EdgeConfig {
        EdgeConfig {
            generation_model: self.generation_model.clone(),
            verification_model: self.verification_model.clone(),
            cap: self.cap,
            temperature: 0.0,
            max_output: self.max_output,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecapSection {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub k: usize,
    pub relation_model: String,
}

impl Default for RecapSection {
    fn default() -> Self {
        let c = RecapConfig::default();
        RecapSection {
            alpha: c.alpha,
            beta: c.beta,
            lambda: c.lambda,
            k: c.k,
            relation_model: EdgeConfig::default().generation_model,
        }
    }
}

impl RecapSection {
    pub fn recap_config(&self) -> RecapConfig {
        RecapConfig {
            alpha: self.alpha,
            beta: self.beta,
            lambda: self.lambda,
            k: self.k,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub lambda: f64,
    pub k: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            lambda: DEFAULT_LAMBDA,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub queries_per_batch: usize,
    pub learning_rate: f64,
    pub warmup_ratio: f64,
    pub projection_dim: Option<usize>,
    /// First-stage candidates per training query.
    pub candidates: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            epochs: t.epochs,
            queries_per_batch: t.queries_per_batch,
            learning_rate: t.learning_rate,
            warmup_ratio: t.warmup_ratio,
            projection_dim: t.projection_dim,
            candidates: DEFAULT_TOP_N,
        }
    }
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            queries_per_batch: self.queries_per_batch,
            learning_rate: self.learning_rate,
            warmup_ratio: self.warmup_ratio,
            seed,
            projection_dim: self.projection_dim,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RerankSection {
    pub top_n: usize,
    pub k: usize,
}

impl Default for RerankSection {
    fn default() -> Self {
        RerankSection {
            top_n: DEFAULT_TOP_N,
            k: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QaSection {
    pub budget: usize,
    pub lambda: f64,
    pub include_options: bool,
    pub model: String,
    pub parallelism: usize,
}

impl Default for QaSection {
    fn default() -> Self {
        QaSection {
            budget: 1150,
            lambda: DEFAULT_LAMBDA,
            include_options: false,
            model: EdgeConfig::default().verification_model,
            parallelism: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub chat: ProviderConfig,
    pub embedding: EmbeddingConfig,
    pub paths: Paths,
    pub build: BuildSection,
    pub recap: RecapSection,
    pub retrieval: RetrievalSection,
    pub train: TrainSection,
    pub rerank: RerankSection,
    pub qa: QaSection,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl RunConfig {
    /// Parse a TOML file; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.into(),
            source,
        })?;
        let mut config: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.into(),
            message: e.to_string(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_relative(base);
        Ok(config)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let p = &mut self.paths;
        let all = [
            &mut p.input,
            &mut p.corpus,
            &mut p.graph,
            &mut p.queries,
            &mut p.questions,
            &mut p.replies,
            &mut p.recap_instance,
            &mut p.params,
            &mut p.pairs,
            &mut p.checkpoints,
            &mut p.output,
            &mut self.chat.fixture_dir,
        ];
        for path in all.into_iter().flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_and_resolves_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(
            &path,
            "seed = 7\n[chat]\nmode = \"record\"\nfixture_dir = \"fx\"\n[paths]\ninput = \"/abs/novel.txt\"\ngraph = \"g.narco.jsonl\"\n[build]\nwindow = 2\n",
        )
        .unwrap();
        let c = RunConfig::load(&path).unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.build.window, 2);
        assert_eq!(c.build.cap, DEFAULT_CAP);
        assert_eq!(c.chat.mode, crate::gateway::Mode::Record);
        assert_eq!(c.chat.fixture_dir, Some(dir.path().join("fx")));
        assert_eq!(c.paths.input, Some(PathBuf::from("/abs/novel.txt")));
        assert_eq!(c.paths.graph, Some(dir.path().join("g.narco.jsonl")));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "[build]\nwindw = 2\n").unwrap();
        let err = RunConfig::load(&path).unwrap_err().to_string();
        assert!(err.contains("windw"), "{err}");
    }
}
