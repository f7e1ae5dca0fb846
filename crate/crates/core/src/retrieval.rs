//! Embedding providers, query–edge score fusion, node ranking and nDCG.
//!
//! A node's fused score is its query cosine plus `lambda` times the best
//! query cosine among the questions the node raises about earlier nodes.
//! Nodes without such questions keep their base score.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::NarrativeGraph;
use crate::linalg::{dot, l2_norm};

/// Interpolation weight tuned on a development split.
pub const DEFAULT_LAMBDA: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RetrievalError {
    #[error("embedding provider error: {0}")]
    Provider(String),
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("cannot normalize a zero or non-finite vector")]
    Degenerate,
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("provider returned {found} vectors for {expected} texts")]
    CountMismatch { expected: usize, found: usize },
}

/// An L2-normalized embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct EmbeddingVector(Vec<f64>);

impl EmbeddingVector {
    /// Normalize `values` to unit length.
    pub fn new(mut values: Vec<f64>) -> Result<Self, RetrievalError> {
        let norm = l2_norm(&values);
        if !(norm.is_finite() && norm > 0.0) {
            return Err(RetrievalError::Degenerate);
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(EmbeddingVector(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn dot(&self, other: &EmbeddingVector) -> Result<f64, RetrievalError> {
        if self.dim() != other.dim() {
            return Err(RetrievalError::DimensionMismatch {
                expected: self.dim(),
                found: other.dim(),
            });
        }
        Ok(dot(&self.0, &other.0))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl TryFrom<Vec<f64>> for EmbeddingVector {
    type Error = RetrievalError;
    fn try_from(values: Vec<f64>) -> Result<Self, Self::Error> {
        EmbeddingVector::new(values)
    }
}

impl From<EmbeddingVector> for Vec<f64> {
    fn from(v: EmbeddingVector) -> Self {
        v.0
    }
}

/// Source of raw (not necessarily normalized) text embeddings.
pub trait EmbeddingProvider {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError>;
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for &T {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        (**self).embed_batch(texts)
    }
}

impl<T: EmbeddingProvider + ?Sized> EmbeddingProvider for alloc::boxed::Box<T> {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        (**self).embed_batch(texts)
    }
}

/// Embed and normalize a batch; every vector must share one dimension.
pub fn embed<P: EmbeddingProvider + ?Sized>(
    texts: &[&str],
    provider: &P,
) -> Result<Vec<EmbeddingVector>, RetrievalError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let raw = provider.embed_batch(texts)?;
    if raw.len() != texts.len() {
        return Err(RetrievalError::CountMismatch {
            expected: texts.len(),
            found: raw.len(),
        });
    }
    let dim = raw[0].len();
    raw.into_iter()
        .map(|v| {
            if v.len() != dim {
                return Err(RetrievalError::DimensionMismatch {
                    expected: dim,
                    found: v.len(),
                });
            }
            EmbeddingVector::new(v)
        })
        .collect()
}

/// Deterministic offline provider: each text maps to a pseudo-random unit
/// vector seeded by `(seed, text)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MockEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl MockEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        MockEmbedder { dim, seed }
    }

    pub fn vector(&self, text: &str) -> Vec<f64> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.as_bytes());
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(seed);
        (0..self.dim)
            .map(|_| {
                let unit = (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
                2.0 * unit - 1.0
            })
            .collect()
    }
}

impl EmbeddingProvider for MockEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts.iter().map(|t| self.vector(t)).collect())
    }
}

/// Feature-hashed bag of words. Offline and deterministic like
/// [`MockEmbedder`], but texts sharing words get similar vectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashingEmbedder {
    pub dim: usize,
}

impl EmbeddingProvider for HashingEmbedder {
    fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
        Ok(texts
            .iter()
            .map(|text| {
                let mut v = alloc::vec![0.0; self.dim];
                for word in crate::text::normalize_for_match(text).split(' ') {
                    if word.len() < 3 {
                        continue;
                    }
                    let h = Sha256::digest(word.as_bytes());
                    let mut idx = [0u8; 8];
                    idx.copy_from_slice(&h[..8]);
                    let slot = (u64::from_le_bytes(idx) % self.dim as u64) as usize;
                    v[slot] += if h[8] & 1 == 0 { 1.0 } else { -1.0 };
                }
                if v.iter().all(|x| *x == 0.0) {
                    v[0] = 1.0;
                }
                v
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub lambda: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { lambda: DEFAULT_LAMBDA }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.lambda.is_finite() && self.lambda >= 0.0 {
            Ok(())
        } else {
            Err("lambda must be finite and non-negative".to_string())
        }
    }
}

/// `h_q·h_v + lambda · max_j h_q·h_e_j`; the max term is 0 with no questions.
pub fn zero_shot_score(
    query: &EmbeddingVector,
    node: &EmbeddingVector,
    questions: &[EmbeddingVector],
    config: &FusionConfig,
) -> Result<f64, RetrievalError> {
    let base = query.dot(node)?;
    let mut best: Option<f64> = None;
    for q in questions {
        let s = query.dot(q)?;
        best = Some(best.map_or(s, |b: f64| b.max(s)));
    }
    Ok(base + config.lambda * best.unwrap_or(0.0))
}

/// Node and question embeddings of one graph, computed once per corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbeddings {
    pub nodes: Vec<EmbeddingVector>,
    pub questions: Vec<EmbeddingVector>,
    /// Question indices raised by each node about earlier nodes.
    pub outgoing: Vec<Vec<usize>>,
    /// Question indices answered by each node for later nodes.
    pub incoming: Vec<Vec<usize>>,
}

impl GraphEmbeddings {
    pub fn compute<P: EmbeddingProvider + ?Sized>(
        graph: &NarrativeGraph,
        provider: &P,
    ) -> Result<Self, RetrievalError> {
        let node_texts: Vec<String> = graph.nodes.iter().map(|n| n.text()).collect();
        let node_refs: Vec<&str> = node_texts.iter().map(String::as_str).collect();
        let nodes = embed(&node_refs, provider)?;
        let mut question_refs = Vec::new();
        let mut outgoing = alloc::vec![Vec::new(); graph.nodes.len()];
        let mut incoming = alloc::vec![Vec::new(); graph.nodes.len()];
        for edge in &graph.edges {
            for q in &edge.questions {
                let idx = question_refs.len();
                question_refs.push(q.text.as_str());
                outgoing[edge.target].push(idx);
                incoming[edge.source].push(idx);
            }
        }
        let questions = embed(&question_refs, provider)?;
        if let (Some(n), Some(q)) = (nodes.first(), questions.first()) {
            if n.dim() != q.dim() {
                return Err(RetrievalError::DimensionMismatch {
                    expected: n.dim(),
                    found: q.dim(),
                });
            }
        }
        Ok(GraphEmbeddings {
            nodes,
            questions,
            outgoing,
            incoming,
        })
    }

    pub fn outgoing_vectors(&self, node: usize) -> Vec<EmbeddingVector> {
        self.outgoing[node].iter().map(|&i| self.questions[i].clone()).collect()
    }

    /// Outgoing and incoming question vectors of `node`.
    pub fn neighbourhood_vectors(&self, node: usize) -> Vec<EmbeddingVector> {
        self.outgoing[node]
            .iter()
            .chain(&self.incoming[node])
            .map(|&i| self.questions[i].clone())
            .collect()
    }

    /// Every node scored against `query`, best first, ties by node id.
    pub fn rank(&self, query: &EmbeddingVector, config: &FusionConfig) -> Result<Vec<(usize, f64)>, RetrievalError> {
        let mut scored = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let questions = self.outgoing_vectors(id);
            scored.push((id, zero_shot_score(query, node, &questions, config)?));
        }
        sort_by_score(&mut scored);
        Ok(scored)
    }
}

/// Descending by score, ascending id on ties.
pub fn sort_by_score(scored: &mut [(usize, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
}

/// Embed `query`, score every node of `graph`, return the top `k`.
pub fn retrieve<P: EmbeddingProvider + ?Sized>(
    query: &str,
    graph: &NarrativeGraph,
    provider: &P,
    config: &FusionConfig,
    k: usize,
) -> Result<Vec<(usize, f64)>, RetrievalError> {
    if graph.nodes.is_empty() {
        return Err(RetrievalError::EmptyGraph);
    }
    let embeddings = GraphEmbeddings::compute(graph, provider)?;
    let query = embed(&[query], provider)?.remove(0);
    let mut ranked = embeddings.rank(&query, config)?;
    ranked.truncate(k);
    Ok(ranked)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NdcgScore {
    pub value: f64,
    /// False when the relevance set is empty; `value` is then 0.
    pub has_positives: bool,
}

/// Binary-relevance nDCG@k with discount `1 / log2(rank + 1)`.
///
/// # Panics
///
/// Panics if `k` is zero.
pub fn ndcg_at_k<T: Ord>(ranked: &[T], relevant: &BTreeSet<T>, k: usize) -> NdcgScore {
    assert!(k >= 1, "k must be at least 1");
    if relevant.is_empty() {
        return NdcgScore {
            value: 0.0,
            has_positives: false,
        };
    }
    let discount = |pos: usize| 1.0 / libm::log2(pos as f64 + 2.0);
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| relevant.contains(id))
        .map(|(pos, _)| discount(pos))
        .sum();
    let ideal: f64 = (0..k.min(relevant.len())).map(discount).sum();
    NdcgScore {
        value: dcg / ideal,
        has_positives: true,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::Node;
    use crate::edge::{Question, Verdict};
    use crate::graph::Edge;
    use alloc::vec;
    use proptest::prelude::*;

    fn unit(v: &[f64]) -> EmbeddingVector {
        EmbeddingVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn normalization_contract() {
        let v = unit(&[3.0, 4.0]);
        assert!((l2_norm(v.as_slice()) - 1.0).abs() <= 1e-12);
        assert_eq!(EmbeddingVector::new(vec![0.0, 0.0]), Err(RetrievalError::Degenerate));
        let mock = MockEmbedder::new(16, 7);
        for v in embed(&["a", "b", "a"], &mock).unwrap() {
            assert!((l2_norm(v.as_slice()) - 1.0).abs() <= 1e-6);
        }
        let e = embed(&["same", "same"], &mock).unwrap();
        assert_eq!(e[0], e[1]);
    }

    struct Ragged;
    impl EmbeddingProvider for Ragged {
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
            Ok(texts.iter().enumerate().map(|(i, _)| vec![1.0; i + 1]).collect())
        }
    }

    #[test]
    fn ragged_batch_is_rejected() {
        assert_eq!(
            embed(&["a", "b"], &Ragged),
            Err(RetrievalError::DimensionMismatch { expected: 1, found: 2 })
        );
    }

    /// Unit vector whose dot product with `e0` is `c`.
    fn at_cos(c: f64) -> EmbeddingVector {
        unit(&[c, libm::sqrt(1.0 - c * c), 0.0])
    }

    #[test]
    fn hand_example() {
        let q = unit(&[1.0, 0.0, 0.0]);
        let v = at_cos(0.5);
        let qs = [at_cos(0.2), at_cos(0.9)];
        let s = zero_shot_score(&q, &v, &qs, &FusionConfig { lambda: 0.1 }).unwrap();
        assert!((s - 0.59).abs() < 1e-12);
        let s0 = zero_shot_score(&q, &v, &qs, &FusionConfig { lambda: 0.0 }).unwrap();
        assert_eq!(s0, q.dot(&v).unwrap());
        let none = zero_shot_score(&q, &v, &[], &FusionConfig { lambda: 5.0 }).unwrap();
        assert_eq!(none, q.dot(&v).unwrap());
        assert!(zero_shot_score(&q, &unit(&[1.0, 0.0]), &[], &FusionConfig::default()).is_err());
    }

    #[test]
    fn ndcg_cases() {
        let rel: BTreeSet<usize> = [1].into_iter().collect();
        assert_eq!(ndcg_at_k(&[1, 2, 3], &rel, 5).value, 1.0);
        let v = ndcg_at_k(&[0, 1, 2, 3, 4], &rel, 5).value;
        assert!((v - 1.0 / libm::log2(3.0)).abs() < 1e-12);
        assert!((v - 0.6309).abs() < 1e-4);
        assert_eq!(ndcg_at_k(&[0, 2, 3], &rel, 3).value, 0.0);
        let none = ndcg_at_k(&[0, 2], &BTreeSet::new(), 3);
        assert!(!none.has_positives);
        assert_eq!(none.value, 0.0);
    }

    fn graph_with(texts: &[&str], edges: Vec<(usize, usize, Vec<&str>)>) -> NarrativeGraph {
        let nodes = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Node::from_passage(i, t, 240))
            .collect();
        let mut g = NarrativeGraph::new(nodes);
        for (s, t, qs) in edges {
            let questions = qs
                .into_iter()
                .map(|q| Question {
                    text: q.into(),
                    source_pair: (s, t),
                    claim_ref: 0,
                    verdict: Verdict::Retained,
                    answer: None,
                    evidence: vec![],
                })
                .collect();
            g.edges.push(Edge {
                source: s,
                target: t,
                questions,
                discarded_count: 0,
            });
        }
        g
    }

    #[test]
    fn single_node_graph() {
        let g = graph_with(&["Only node."], vec![]);
        let r = retrieve("anything", &g, &MockEmbedder::new(8, 1), &FusionConfig::default(), 5).unwrap();
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].0, 0);
        let empty = NarrativeGraph::new(vec![]);
        assert_eq!(
            retrieve("q", &empty, &MockEmbedder::new(8, 1), &FusionConfig::default(), 5),
            Err(RetrievalError::EmptyGraph)
        );
    }

    /// Provider with hand-picked vectors per text.
    struct Table(Vec<(&'static str, Vec<f64>)>);
    impl EmbeddingProvider for Table {
        fn embed_batch(&self, texts: &[&str]) -> Result<Vec<Vec<f64>>, RetrievalError> {
            texts
                .iter()
                .map(|t| {
                    self.0
                        .iter()
                        .find(|(k, _)| k == t)
                        .map(|(_, v)| v.clone())
                        .ok_or_else(|| RetrievalError::Provider(alloc::format!("no vector for {t}")))
                })
                .collect()
        }
    }

    #[test]
    fn planted_question_lifts_node() {
        let c = libm::sqrt(0.5);
        let table = Table(vec![
            ("query", vec![1.0, 0.0, 0.0]),
            ("Node A.", vec![c, c, 0.0]),
            ("Node B.", vec![c, 0.0, c]),
            ("Node C.", vec![c, -c, 0.0]),
            ("matches", vec![1.0, 0.0, 0.0]),
            ("unrelated", vec![0.0, 1.0, 0.0]),
        ]);
        let g = graph_with(
            &["Node A.", "Node B.", "Node C."],
            vec![(0, 1, vec!["matches"]), (1, 2, vec!["unrelated"])],
        );
        let fused = retrieve("query", &g, &table, &FusionConfig { lambda: 0.5 }, 3).unwrap();
        assert_eq!(fused[0].0, 1);
        let base = retrieve("query", &g, &table, &FusionConfig { lambda: 0.0 }, 3).unwrap();
        assert_eq!(base.iter().map(|r| r.0).collect::<Vec<_>>(), vec![0, 1, 2]);
    }

    proptest! {
        #[test]
        fn fused_score_within_lambda_of_base(
            seed in 0u64..1000, m in 0usize..5, lambda in 0.0f64..3.0
        ) {
            let mock = MockEmbedder::new(6, seed);
            let q = embed(&["q"], &mock).unwrap().remove(0);
            let v = embed(&["v"], &mock).unwrap().remove(0);
            let texts: Vec<String> = (0..m).map(|i| alloc::format!("e{i}")).collect();
            let refs: Vec<&str> = texts.iter().map(String::as_str).collect();
            let qs = embed(&refs, &mock).unwrap();
            let base = q.dot(&v).unwrap();
            let fused = zero_shot_score(&q, &v, &qs, &FusionConfig { lambda }).unwrap();
            prop_assert!((fused - base).abs() <= lambda + 1e-12);
        }
    }
}
