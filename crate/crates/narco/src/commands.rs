//! Subcommand implementations. Each takes a resolved [`RunConfig`] and, where
//! needed, a chat backend, and returns a serializable result.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use narco_core::chat::{ChatBackend, ChatRequest, GatewayError, Message};
use narco_core::chunking::Node;
use narco_core::edge::{EdgeBuilder, EdgeError};
use narco_core::graph::{GraphStats, NarrativeGraph};
use narco_core::prompts;
use narco_core::qa::{
    answer_accuracy, assemble_from_ranking, render_qa_prompt, AccuracyReport, ContextBudget, MCQuestion,
    OptionLabelParser, QaError,
};
use narco_core::recap::{
    f1_at_k, rank_candidates, score_relations, PrfScores, RankedCandidate, RecapCandidate, RecapError, RecapInstance,
    RelationScore,
};
use narco_core::rerank::{rerank_nodes, train, FusionError, FusionInstance, TrainingBatch};
use narco_core::retrieval::{embed, ndcg_at_k, EmbeddingProvider, FusionConfig, GraphEmbeddings, RetrievalError};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::embedding;
use crate::io::{self, InputError, QueryRecord, RecapInstanceRecord};
use crate::params::ParamsFile;
use crate::pipeline::{self, BuildOptions, BuildReport, PairFailure, PipelineError};

/// Exit status 1 for `Validation`, 2 for `Runtime`.
#[derive(Debug, thiserror::Error)]
pub enum CommandError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
}

impl CommandError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CommandError::Validation(_) => 1,
            CommandError::Runtime(_) => 2,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CommandError::Validation(_) => "validation",
            CommandError::Runtime(_) => "runtime",
        }
    }

    pub fn missing(field: &str, flag: &str) -> Self {
        CommandError::Validation(format!(
            "missing required setting `{field}` (config file) or {flag} (flag)"
        ))
    }
}

impl From<InputError> for CommandError {
    fn from(e: InputError) -> Self {
        CommandError::Validation(e.to_string())
    }
}

impl From<GatewayError> for CommandError {
    fn from(e: GatewayError) -> Self {
        match e {
            GatewayError::InvalidRequest(_) => CommandError::Validation(e.to_string()),
            _ => CommandError::Runtime(e.to_string()),
        }
    }
}

impl From<EdgeError> for CommandError {
    fn from(e: EdgeError) -> Self {
        match e {
            EdgeError::InvalidCap | EdgeError::InvalidPair(..) => CommandError::Validation(e.to_string()),
            EdgeError::Gateway(g) => g.into(),
            _ => CommandError::Runtime(e.to_string()),
        }
    }
}

impl From<PipelineError> for CommandError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Checkpoint { .. } => CommandError::Runtime(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<RetrievalError> for CommandError {
    fn from(e: RetrievalError) -> Self {
        match e {
            RetrievalError::Provider(_) => CommandError::Runtime(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<RecapError> for CommandError {
    fn from(e: RecapError) -> Self {
        match e {
            RecapError::InvalidConfig(_) | RecapError::EdgeMismatch { .. } => CommandError::Validation(e.to_string()),
            RecapError::Gateway(g) => g.into(),
            _ => CommandError::Runtime(e.to_string()),
        }
    }
}

impl From<QaError> for CommandError {
    fn from(e: QaError) -> Self {
        match e {
            QaError::Retrieval(r) => r.into(),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

impl From<FusionError> for CommandError {
    fn from(e: FusionError) -> Self {
        match e {
            FusionError::NonFiniteLoss { .. } => CommandError::Runtime(e.to_string()),
            _ => CommandError::Validation(e.to_string()),
        }
    }
}

fn require<'a>(path: &'a Option<PathBuf>, field: &str, flag: &str) -> Result<&'a Path, CommandError> {
    path.as_deref().ok_or_else(|| CommandError::missing(field, flag))
}

fn positive(value: usize, name: &str) -> Result<(), CommandError> {
    if value == 0 {
        return Err(CommandError::Validation(format!("`{name}` must be at least 1")));
    }
    Ok(())
}

/// Nodes from `paths.input` (plain text) or `paths.corpus` (JSON lines).
pub fn load_nodes(cfg: &RunConfig) -> Result<Vec<Node>, CommandError> {
    positive(cfg.build.max_words, "build.max_words")?;
    match (&cfg.paths.input, &cfg.paths.corpus) {
        (Some(_), Some(_)) => Err(CommandError::Validation(
            "set only one of `paths.input` and `paths.corpus`".into(),
        )),
        (Some(p), None) => Ok(io::text_nodes(p, cfg.build.max_words)?),
        (None, Some(p)) => Ok(io::corpus_nodes(p, cfg.build.max_words)?),
        (None, None) => Err(CommandError::missing("paths.corpus", "--corpus or --input")),
    }
}

pub fn build_graph<B: ChatBackend + Sync>(cfg: &RunConfig, backend: B) -> Result<BuildReport, CommandError> {
    let nodes = load_nodes(cfg)?;
    positive(cfg.build.cap, "build.cap")?;
    let pairs = cfg.paths.pairs.as_deref().map(io::read_pairs).transpose()?;
    if pairs.is_none() {
        positive(cfg.build.window, "build.window")?;
    }
    let builder = EdgeBuilder::new(backend, cfg.build.edge_config());
    let options = BuildOptions {
        window: cfg.build.window,
        pairs,
        parallelism: cfg.build.parallelism,
        checkpoint_dir: cfg.paths.checkpoints.clone(),
    };
    Ok(pipeline::build_graph(nodes, &builder, &options)?)
}

pub fn load_graph(cfg: &RunConfig) -> Result<NarrativeGraph, CommandError> {
    Ok(io::read_graph(require(&cfg.paths.graph, "paths.graph", "--graph")?)?)
}

pub fn stats(cfg: &RunConfig) -> Result<GraphStats, CommandError> {
    Ok(load_graph(cfg)?.stats())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeSummary {
    pub candidate: usize,
    pub questions: Vec<String>,
    pub discarded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecapOutput {
    pub target_id: usize,
    pub k: usize,
    pub selected: Vec<usize>,
    pub ranked: Vec<RankedCandidate>,
    pub relation_scores: Vec<RelationScore>,
    pub edges: Vec<EdgeSummary>,
    pub metrics: PrfScores,
    pub baseline_metrics: PrfScores,
}

pub fn recap<B: ChatBackend + Sync>(cfg: &RunConfig, backend: B) -> Result<RecapOutput, CommandError> {
    let path = require(&cfg.paths.recap_instance, "paths.recap_instance", "--instance")?;
    let record: RecapInstanceRecord = io::read_json(path)?;
    record.validate(path)?;
    let recap_config = cfg.recap.recap_config();
    recap_config.validate()?;
    positive(cfg.build.cap, "build.cap")?;

    let mut candidates = record.candidates.clone();
    candidates.sort_by_key(|c| c.id);
    let max_words = cfg.build.max_words;
    let target = Node::from_passage(record.target_position(), &record.target_text, max_words);
    let nodes: Vec<Node> = candidates
        .iter()
        .map(|c| Node::from_passage(c.id, &c.text, max_words))
        .collect();
    let builder = EdgeBuilder::new(&backend, cfg.build.edge_config());
    let edges = pipeline::par_map(&nodes, cfg.build.parallelism, |n| builder.build_edge(n, &target));
    let mut recap_candidates = Vec::with_capacity(nodes.len());
    for (node, edge) in nodes.into_iter().zip(edges) {
        recap_candidates.push(RecapCandidate { node, edge: edge? });
    }
    let instance = RecapInstance {
        target,
        candidates: recap_candidates,
        gold: record.gold.clone(),
    };
    let relation_scores = score_relations(&instance, &backend, &cfg.recap.relation_model)?;
    let ranked = rank_candidates(&instance, &relation_scores, &record.baseline, &recap_config)?;
    let ids = RankedCandidate::ids(&ranked);
    let baseline: Vec<usize> = record.baseline.iter().copied().collect();
    Ok(RecapOutput {
        target_id: instance.target.id,
        k: recap_config.k,
        selected: ids.iter().take(recap_config.k).copied().collect(),
        metrics: f1_at_k(&ids, &record.gold, recap_config.k),
        baseline_metrics: f1_at_k(&baseline, &record.gold, baseline.len().max(1)),
        edges: instance
            .candidates
            .iter()
            .map(|c| EdgeSummary {
                candidate: c.node.id,
                questions: c.edge.questions.iter().map(|q| q.text.clone()).collect(),
                discarded: c.edge.discarded_count,
            })
            .collect(),
        ranked,
        relation_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredNode {
    pub id: usize,
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub ranked: Vec<ScoredNode>,
    /// Absent when the query lists no positives.
    pub ndcg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline_ndcg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalOutput {
    pub k: usize,
    pub lambda: f64,
    pub mean_ndcg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_baseline_ndcg: Option<f64>,
    pub queries: Vec<QueryResult>,
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

fn ndcg(ids: &[usize], positives: &BTreeSet<usize>, k: usize) -> Option<f64> {
    let s = ndcg_at_k(ids, positives, k);
    s.has_positives.then_some(s.value)
}

struct Workspace {
    queries: Vec<QueryRecord>,
    embeddings: GraphEmbeddings,
    provider: Box<dyn EmbeddingProvider + Send + Sync>,
}

fn workspace(cfg: &RunConfig, embedding: &embedding::EmbeddingConfig) -> Result<Workspace, CommandError> {
    let graph = load_graph(cfg)?;
    if graph.nodes.is_empty() {
        return Err(CommandError::Validation("graph has no nodes".into()));
    }
    let queries = io::read_queries(
        require(&cfg.paths.queries, "paths.queries", "--queries")?,
        graph.nodes.len(),
    )?;
    let provider = embedding::provider(embedding).map_err(CommandError::Validation)?;
    let embeddings = GraphEmbeddings::compute(&graph, &provider)?;
    Ok(Workspace {
        queries,
        embeddings,
        provider,
    })
}

fn fusion(lambda: f64) -> Result<FusionConfig, CommandError> {
    let f = FusionConfig { lambda };
    f.validate().map_err(CommandError::Validation)?;
    Ok(f)
}

pub fn retrieve(cfg: &RunConfig) -> Result<RetrievalOutput, CommandError> {
    positive(cfg.retrieval.k, "retrieval.k")?;
    let fusion = fusion(cfg.retrieval.lambda)?;
    let ws = workspace(cfg, &cfg.embedding)?;
    let k = cfg.retrieval.k;
    let mut results = Vec::with_capacity(ws.queries.len());
    for q in &ws.queries {
        let hq = embed(&[q.text.as_str()], &ws.provider)?.remove(0);
        let mut ranked = ws.embeddings.rank(&hq, &fusion)?;
        let ids: Vec<usize> = ranked.iter().map(|r| r.0).collect();
        ranked.truncate(k);
        results.push(QueryResult {
            query_id: q.query_id.clone(),
            ranked: ranked
                .into_iter()
                .map(|(id, s)| ScoredNode { id, score: Some(s) })
                .collect(),
            ndcg: ndcg(&ids, &q.positives, k),
            baseline_ndcg: None,
        });
    }
    Ok(RetrievalOutput {
        k,
        lambda: fusion.lambda,
        mean_ndcg: mean(results.iter().map(|r| r.ndcg)),
        mean_baseline_ndcg: None,
        queries: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOutput {
    pub queries_used: usize,
    pub queries_skipped: usize,
    pub steps: usize,
    pub first_loss: Option<f64>,
    pub final_loss: Option<f64>,
    pub params: ParamsFile,
}

pub fn train_rerank(cfg: &RunConfig) -> Result<TrainOutput, CommandError> {
    positive(cfg.train.candidates, "train.candidates")?;
    let fusion = fusion(cfg.retrieval.lambda)?;
    let ws = workspace(cfg, &cfg.embedding)?;
    let mut dataset = Vec::new();
    let mut skipped = 0;
    for q in &ws.queries {
        if q.positives.is_empty() {
            skipped += 1;
            continue;
        }
        let hq = embed(&[q.text.as_str()], &ws.provider)?.remove(0);
        let mut ids: Vec<usize> = ws
            .embeddings
            .rank(&hq, &fusion)?
            .into_iter()
            .take(cfg.train.candidates)
            .map(|r| r.0)
            .collect();
        for &p in &q.positives {
            if !ids.contains(&p) {
                ids.push(p);
            }
        }
        let positives = ids
            .iter()
            .enumerate()
            .filter(|(_, id)| q.positives.contains(id))
            .map(|(i, _)| i)
            .collect();
        let candidates = ids
            .iter()
            .map(|&id| FusionInstance::from_graph(&ws.embeddings, id))
            .collect();
        dataset.push(TrainingBatch {
            query: hq,
            candidates,
            positives,
        });
    }
    if dataset.is_empty() {
        return Err(CommandError::Validation(
            "no query in `paths.queries` lists positives".into(),
        ));
    }
    let train_config = cfg.train.train_config(cfg.seed);
    let outcome = train(&dataset, &train_config)?;
    Ok(TrainOutput {
        queries_used: dataset.len(),
        queries_skipped: skipped,
        steps: outcome.loss_curve.len(),
        first_loss: outcome.loss_curve.first().map(|p| p.loss),
        final_loss: outcome.loss_curve.last().map(|p| p.loss),
        params: ParamsFile::new(outcome.params, train_config, cfg.embedding.clone(), &outcome.loss_curve),
    })
}

pub fn load_params(cfg: &RunConfig) -> Result<ParamsFile, CommandError> {
    let path = require(&cfg.paths.params, "paths.params", "--params")?;
    let text = io::read_text(path)?;
    ParamsFile::from_json(&text).map_err(|e| CommandError::Validation(format!("{}: {e}", path.display())))
}

pub fn rerank(cfg: &RunConfig) -> Result<RetrievalOutput, CommandError> {
    positive(cfg.rerank.top_n, "rerank.top_n")?;
    positive(cfg.rerank.k, "rerank.k")?;
    let fusion = fusion(cfg.retrieval.lambda)?;
    let params = load_params(cfg)?;
    let ws = workspace(cfg, &params.embedding)?;
    let k = cfg.rerank.k;
    let mut results = Vec::with_capacity(ws.queries.len());
    for q in &ws.queries {
        let hq = embed(&[q.text.as_str()], &ws.provider)?.remove(0);
        let baseline: Vec<usize> = ws.embeddings.rank(&hq, &fusion)?.into_iter().map(|r| r.0).collect();
        let reranked = rerank_nodes(&hq, &baseline, &ws.embeddings, &params.params, cfg.rerank.top_n)?;
        let ids: Vec<usize> = reranked.iter().map(|r| r.0).collect();
        results.push(QueryResult {
            query_id: q.query_id.clone(),
            ndcg: ndcg(&ids, &q.positives, k),
            baseline_ndcg: ndcg(&baseline, &q.positives, k),
            ranked: reranked
                .into_iter()
                .take(k)
                .map(|(id, score)| ScoredNode { id, score })
                .collect(),
        });
    }
    Ok(RetrievalOutput {
        k,
        lambda: fusion.lambda,
        mean_ndcg: mean(results.iter().map(|r| r.ndcg)),
        mean_baseline_ndcg: mean(results.iter().map(|r| r.baseline_ndcg)),
        queries: results,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaContextRecord {
    pub index: usize,
    pub nodes: Vec<usize>,
    pub truncated: bool,
    pub words: usize,
    pub context: String,
}

fn qa_contexts(cfg: &RunConfig) -> Result<(Vec<MCQuestion>, Vec<QaContextRecord>), CommandError> {
    let budget = ContextBudget::new(cfg.qa.budget)?;
    let fusion = fusion(cfg.qa.lambda)?;
    let graph = load_graph(cfg)?;
    if graph.nodes.is_empty() {
        return Err(QaError::EmptyGraph.into());
    }
    let questions: Vec<MCQuestion> = io::read_jsonl(require(&cfg.paths.questions, "paths.questions", "--questions")?)?;
    for (i, q) in questions.iter().enumerate() {
        q.validate()
            .map_err(|e| CommandError::Validation(format!("question {i}: {e}")))?;
    }
    let provider = embedding::provider(&cfg.embedding).map_err(CommandError::Validation)?;
    let embeddings = GraphEmbeddings::compute(&graph, &provider)?;
    let mut out = Vec::with_capacity(questions.len());
    for (index, q) in questions.iter().enumerate() {
        let query = q.retrieval_query(cfg.qa.include_options);
        let hq = embed(&[query.as_str()], &provider)?.remove(0);
        let ranking = embeddings.rank(&hq, &fusion)?;
        let ctx = assemble_from_ranking(&graph, ranking, budget)?;
        out.push(QaContextRecord {
            index,
            words: ctx.word_count(),
            nodes: ctx.nodes,
            truncated: ctx.truncated,
            context: ctx.text,
        });
    }
    Ok((questions, out))
}

pub fn qa_context(cfg: &RunConfig) -> Result<Vec<QaContextRecord>, CommandError> {
    Ok(qa_contexts(cfg)?.1)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplyRecord {
    pub index: usize,
    pub reply: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QaEvalOutput {
    pub report: AccuracyReport,
    pub prompt_version: String,
    pub replies: Vec<ReplyRecord>,
}

/// Answer every question over its assembled context and score the replies.
/// With `paths.replies` set, stored replies are scored instead of calling the
/// backend.
pub fn qa_eval<B: ChatBackend + Sync>(cfg: &RunConfig, backend: B) -> Result<QaEvalOutput, CommandError> {
    let (questions, contexts) = qa_contexts(cfg)?;
    let replies: Vec<ReplyRecord> = match &cfg.paths.replies {
        Some(path) => {
            let mut stored: Vec<ReplyRecord> = io::read_jsonl(path)?;
            stored.sort_by_key(|r| r.index);
            let indices: Vec<usize> = stored.iter().map(|r| r.index).collect();
            if indices != (0..questions.len()).collect::<Vec<_>>() {
                return Err(CommandError::Validation(format!(
                    "{}: expected exactly one reply per question index 0..{}",
                    path.display(),
                    questions.len()
                )));
            }
            stored
        }
        None => {
            let system = prompts::SYSTEM.render(&[]);
            let calls = pipeline::par_map(&contexts, cfg.qa.parallelism, |ctx| {
                let prompt = render_qa_prompt(&ctx.context, &questions[ctx.index]);
                let request = ChatRequest::new(&cfg.qa.model, vec![Message::system(&system), Message::user(prompt)]);
                backend.complete(&request).map(|r| ReplyRecord {
                    index: ctx.index,
                    reply: r.content,
                })
            });
            calls.into_iter().collect::<Result<_, _>>()?
        }
    };
    let transcripts: Vec<(MCQuestion, String)> = questions
        .into_iter()
        .zip(replies.iter().map(|r| r.reply.clone()))
        .collect();
    let report = answer_accuracy(&transcripts, &OptionLabelParser)?;
    Ok(QaEvalOutput {
        report,
        prompt_version: prompts::QA.version.into(),
        replies,
    })
}

/// Pair failures as a runtime error.
pub fn failures_error(failures: &[PairFailure]) -> CommandError {
    let listed: Vec<String> = failures
        .iter()
        .map(|f| format!("({}, {}): {}", f.source, f.target, f.error))
        .collect();
    CommandError::Runtime(format!("{} node pair(s) failed: {}", failures.len(), listed.join("; ")))
}
