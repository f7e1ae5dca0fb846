//! Concurrent graph construction with per-pair checkpoints.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use narco_core::chat::ChatBackend;
use narco_core::chunking::Node;
use narco_core::edge::{pair_schedule, EdgeBuilder, EdgeError};
use narco_core::graph::{BuildMeta, Edge, NarrativeGraph};
use narco_core::prompts;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuildOptions {
    pub window: usize,
    /// Realize exactly these pairs instead of the sliding window.
    pub pairs: Option<Vec<(usize, usize)>>,
    pub parallelism: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions {
            window: narco_core::edge::DEFAULT_WINDOW,
            pairs: None,
            parallelism: 4,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairFailure {
    pub source: usize,
    pub target: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildReport {
    /// Successful edges only; failed pairs are listed in `failures`.
    pub graph: NarrativeGraph,
    pub failures: Vec<PairFailure>,
    pub pairs_evaluated: usize,
    pub resumed: usize,
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("window must be at least 1 when no explicit pairs are given")]
    InvalidWindow,
    #[error("invalid pair ({0}, {1}) for {2} nodes")]
    InvalidPair(usize, usize, usize),
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
}

fn sha_hex(parts: &[&str]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p.as_bytes());
    }
    hex::encode(h.finalize())
}

/// Digests of the model ids used for each stage.
pub fn provider_digests(builder_models: &[(&str, &str)]) -> BTreeMap<String, String> {
    builder_models
        .iter()
        .map(|(stage, model)| (stage.to_string(), sha_hex(&[model])))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    key: String,
    edge: Edge,
}

struct CheckpointDir {
    dir: PathBuf,
    salt: String,
}

impl CheckpointDir {
    fn key(&self, prior: &Node, current: &Node) -> String {
        sha_hex(&[
            &self.salt,
            &prior.id.to_string(),
            &prior.text(),
            &current.id.to_string(),
            &current.text(),
        ])
    }

    fn path(&self, source: usize, target: usize) -> PathBuf {
        self.dir.join(format!("pair-{source:05}-{target:05}.json"))
    }

    fn load(&self, prior: &Node, current: &Node) -> Result<Option<Edge>, PipelineError> {
        let path = self.path(prior.id, current.id);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
            Err(e) => {
                return Err(PipelineError::Checkpoint {
                    path,
                    message: e.to_string(),
                })
            }
        };
        let cp: Checkpoint = serde_json::from_slice(&bytes).map_err(|e| PipelineError::Checkpoint {
            path: path.clone(),
            message: e.to_string(),
        })?;
        Ok((cp.key == self.key(prior, current)).then_some(cp.edge))
    }

    fn store(&self, prior: &Node, current: &Node, edge: &Edge) -> Result<(), PipelineError> {
        let path = self.path(prior.id, current.id);
        let fail = |m: String| PipelineError::Checkpoint {
            path: path.clone(),
            message: m,
        };
        fs::create_dir_all(&self.dir).map_err(|e| fail(e.to_string()))?;
        let body = serde_json::to_vec(&Checkpoint {
            key: self.key(prior, current),
            edge: edge.clone(),
        })
        .map_err(|e| fail(e.to_string()))?;
        let mut tmp = tempfile::NamedTempFile::new_in(&self.dir).map_err(|e| fail(e.to_string()))?;
        tmp.write_all(&body).map_err(|e| fail(e.to_string()))?;
        tmp.persist(&path).map_err(|e| fail(e.error.to_string()))?;
        Ok(())
    }
}

/// Apply `f` to every item on up to `parallelism` threads; results come back
/// in input order.
pub fn par_map<T: Sync, R: Send>(items: &[T], parallelism: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let workers = parallelism.clamp(1, items.len().max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(item) = items.get(k) else { break };
                let r = f(item);
                slots.lock().expect("result slots poisoned")[k] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result slots poisoned")
        .into_iter()
        .map(|r| r.expect("every item is processed"))
        .collect()
}

enum Outcome {
    Built(Edge),
    Resumed(Edge),
    Failed(EdgeError),
}

/// Realize every scheduled pair, at most `parallelism` at a time, and merge
/// the edges in `(source, target)` order.
pub fn build_graph<B: ChatBackend + Sync>(
    nodes: Vec<Node>,
    builder: &EdgeBuilder<B>,
    options: &BuildOptions,
) -> Result<BuildReport, PipelineError> {
    let n = nodes.len();
    let mut pairs = match &options.pairs {
        Some(p) => p.clone(),
        None if options.window == 0 => return Err(PipelineError::InvalidWindow),
        None => pair_schedule(n, options.window),
    };
    for &(i, j) in &pairs {
        if i >= j || j >= n {
            return Err(PipelineError::InvalidPair(i, j, n));
        }
    }
    pairs.sort_unstable();
    pairs.dedup();

    let config = builder.config();
    let versions = prompts::versions(&prompts::EDGE_TEMPLATES);
    let salt = format!(
        "{}|{}|{}|{}|{}|{:?}",
        config.generation_model, config.verification_model, config.cap, config.temperature, config.max_output, versions
    );
    let checkpoints = options.checkpoint_dir.clone().map(|dir| CheckpointDir { dir, salt });

    let results = par_map(&pairs, options.parallelism, |&(i, j)| {
        realize(builder, checkpoints.as_ref(), &nodes[i], &nodes[j])
    });

    let mut edges = Vec::with_capacity(pairs.len());
    let mut failures = Vec::new();
    let mut resumed = 0;
    for (&(i, j), r) in pairs.iter().zip(results) {
        match r? {
            Outcome::Built(e) => edges.push(e),
            Outcome::Resumed(e) => {
                resumed += 1;
                edges.push(e);
            }
            Outcome::Failed(err) => {
                log::error!("pair ({i}, {j}) failed: {err}");
                failures.push(PairFailure {
                    source: i,
                    target: j,
                    error: err.to_string(),
                });
            }
        }
    }

    let mut graph = NarrativeGraph::new(nodes);
    graph.edges = edges;
    graph.meta = BuildMeta {
        window: options.pairs.is_none().then_some(options.window),
        cap: config.cap,
        prompt_versions: versions,
        provider_digests: provider_digests(&[
            ("generation", &config.generation_model),
            ("verification", &config.verification_model),
        ]),
        ..BuildMeta::default()
    };
    graph.canonicalize();
    Ok(BuildReport {
        graph,
        failures,
        pairs_evaluated: pairs.len(),
        resumed,
    })
}

fn realize<B: ChatBackend>(
    builder: &EdgeBuilder<B>,
    checkpoints: Option<&CheckpointDir>,
    prior: &Node,
    current: &Node,
) -> Result<Outcome, PipelineError> {
    if let Some(cp) = checkpoints {
        if let Some(edge) = cp.load(prior, current)? {
            return Ok(Outcome::Resumed(edge));
        }
    }
    match builder.build_edge(prior, current) {
        Ok(edge) => {
            if let Some(cp) = checkpoints {
                cp.store(prior, current, &edge)?;
            }
            Ok(Outcome::Built(edge))
        }
        Err(e) => Ok(Outcome::Failed(e)),
    }
}
