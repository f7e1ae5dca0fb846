//! The graph data model, its line-delimited JSON codec, and graph statistics.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::chunking::Node;
use crate::edge::Question;

/// Version tag written into every serialized graph.
pub const FORMAT_VERSION: &str = "narco/1";

/// File extension for serialized graphs.
pub const FILE_EXTENSION: &str = "narco.jsonl";

/// Retained questions linking `source` (earlier) to `target` (later).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edge {
    pub source: usize,
    pub target: usize,
    pub questions: Vec<Question>,
    pub discarded_count: usize,
}

impl Edge {
    pub fn empty(source: usize, target: usize) -> Self {
        Edge {
            source,
            target,
            questions: Vec::new(),
            discarded_count: 0,
        }
    }

    pub fn generated_count(&self) -> usize {
        self.questions.len() + self.discarded_count
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BuildMeta {
    pub format_version: String,
    /// Preceding-node window, absent when explicit pairs were used.
    pub window: Option<usize>,
    pub cap: usize,
    pub prompt_versions: BTreeMap<String, String>,
    pub provider_digests: BTreeMap<String, String>,
}

impl Default for BuildMeta {
    fn default() -> Self {
        BuildMeta {
            format_version: FORMAT_VERSION.to_string(),
            window: None,
            cap: 0,
            prompt_versions: BTreeMap::new(),
            provider_digests: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NarrativeGraph {
    pub nodes: Vec<Node>,
    pub edges: Vec<Edge>,
    pub meta: BuildMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GraphError {
    #[error("unsupported graph format version {found:?} (expected {FORMAT_VERSION:?})")]
    VersionMismatch { found: String },
    #[error("corrupt graph payload: {0}")]
    CorruptPayload(String),
}

impl NarrativeGraph {
    pub fn new(nodes: Vec<Node>) -> Self {
        NarrativeGraph {
            nodes,
            edges: Vec::new(),
            meta: BuildMeta::default(),
        }
    }

    /// Check node ids, edge direction, endpoint validity and pair uniqueness.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (k, node) in self.nodes.iter().enumerate() {
            if node.id != k {
                return Err(GraphError::CorruptPayload(alloc::format!(
                    "node at position {k} has id {}",
                    node.id
                )));
            }
        }
        let mut pairs = BTreeSet::new();
        for edge in &self.edges {
            if edge.source >= edge.target || edge.target >= self.nodes.len() {
                return Err(GraphError::CorruptPayload(alloc::format!(
                    "invalid edge {} -> {}",
                    edge.source,
                    edge.target
                )));
            }
            if !pairs.insert((edge.source, edge.target)) {
                return Err(GraphError::CorruptPayload(alloc::format!(
                    "duplicate edge {} -> {}",
                    edge.source,
                    edge.target
                )));
            }
        }
        Ok(())
    }

    pub fn edge(&self, source: usize, target: usize) -> Option<&Edge> {
        self.edges.iter().find(|e| e.source == source && e.target == target)
    }

    /// Questions raised by `node` about earlier nodes (edges ending at it).
    pub fn outgoing_questions(&self, node: usize) -> impl Iterator<Item = &Question> {
        self.edges
            .iter()
            .filter(move |e| e.target == node)
            .flat_map(|e| e.questions.iter())
    }

    /// Questions raised by later nodes that `node` answers (edges starting at it).
    pub fn incoming_questions(&self, node: usize) -> impl Iterator<Item = &Question> {
        self.edges
            .iter()
            .filter(move |e| e.source == node)
            .flat_map(|e| e.questions.iter())
    }

    /// Sort edges by `(source, target)`, the canonical order.
    pub fn canonicalize(&mut self) {
        self.edges.sort_by_key(|e| (e.source, e.target));
    }

    /// Serialize as line-delimited JSON: one meta line, one line per node, one
    /// line per edge. Edges are written in canonical order.
    pub fn to_jsonl(&self) -> String {
        let mut edges: Vec<&Edge> = self.edges.iter().collect();
        edges.sort_by_key(|e| (e.source, e.target));
        let mut out = String::new();
        let mut push = |record: &Record<'_>| {
            // serializing plain data with string keys cannot fail
            out.push_str(&serde_json::to_string(record).expect("graph record serializes"));
            out.push('\n');
        };
        push(&Record::Meta(&self.meta));
        for node in &self.nodes {
            push(&Record::Node(node));
        }
        for edge in edges {
            push(&Record::Edge(edge));
        }
        out
    }

    pub fn from_jsonl(payload: &str) -> Result<Self, GraphError> {
        let mut lines = payload.lines().filter(|l| !l.trim().is_empty());
        let first = lines
            .next()
            .ok_or_else(|| GraphError::CorruptPayload("empty payload".into()))?;
        let header: Header =
            serde_json::from_str(first).map_err(|e| GraphError::CorruptPayload(alloc::format!("meta line: {e}")))?;
        if header.section != "meta" {
            return Err(GraphError::CorruptPayload("first line is not the meta section".into()));
        }
        if header.format_version != FORMAT_VERSION {
            return Err(GraphError::VersionMismatch {
                found: header.format_version,
            });
        }
        let meta: BuildMeta = match serde_json::from_str::<OwnedRecord>(first) {
            Ok(OwnedRecord::Meta(meta)) => meta,
            Ok(_) => unreachable!("section tag checked above"),
            Err(e) => return Err(GraphError::CorruptPayload(alloc::format!("meta line: {e}"))),
        };
        let mut graph = NarrativeGraph {
            nodes: Vec::new(),
            edges: Vec::new(),
            meta,
        };
        for (n, line) in lines.enumerate() {
            let record: OwnedRecord = serde_json::from_str(line)
                .map_err(|e| GraphError::CorruptPayload(alloc::format!("line {}: {e}", n + 2)))?;
            match record {
                OwnedRecord::Meta(_) => return Err(GraphError::CorruptPayload("repeated meta section".into())),
                OwnedRecord::Node(node) => {
                    if !graph.edges.is_empty() {
                        return Err(GraphError::CorruptPayload("node after edge section".into()));
                    }
                    graph.nodes.push(node);
                }
                OwnedRecord::Edge(edge) => graph.edges.push(edge),
            }
        }
        graph.validate()?;
        graph.canonicalize();
        Ok(graph)
    }

    pub fn stats(&self) -> GraphStats {
        graph_stats(self)
    }
}

#[derive(Serialize)]
#[serde(tag = "section", rename_all = "lowercase")]
enum Record<'a> {
    Meta(&'a BuildMeta),
    Node(&'a Node),
    Edge(&'a Edge),
}

#[derive(Deserialize)]
#[serde(tag = "section", rename_all = "lowercase")]
enum OwnedRecord {
    Meta(BuildMeta),
    Node(Node),
    Edge(Edge),
}

#[derive(Deserialize)]
struct Header {
    section: String,
    format_version: String,
}

/// Graph-level statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphStats {
    pub node_count: usize,
    pub edge_count: usize,
    pub retained_questions: usize,
    pub generated_questions: usize,
    /// Mean number of retained questions incident to a node; every question
    /// counts once for each of its two endpoints.
    pub mean_node_degree: f64,
    /// Discarded over generated; absent when nothing was generated.
    pub filter_rate: Option<f64>,
    pub question_type_histogram: BTreeMap<String, usize>,
}

const INTERROGATIVES: &[&str] = &[
    "what", "why", "how", "who", "whom", "whose", "which", "when", "where", "whether", "is", "are", "was", "were",
    "do", "does", "did", "can", "could", "will", "would", "should", "has", "have", "had", "might", "may",
];

/// Leading interrogative word of a question, lowercased; `"other"` if the
/// question contains none.
pub fn question_type(question: &str) -> String {
    for token in question.split_whitespace() {
        let word: String = token
            .trim_matches(|c: char| !c.is_alphanumeric())
            .chars()
            .flat_map(char::to_lowercase)
            .collect();
        if INTERROGATIVES.contains(&word.as_str()) {
            return word;
        }
    }
    "other".to_string()
}

pub fn graph_stats(graph: &NarrativeGraph) -> GraphStats {
    let retained: usize = graph.edges.iter().map(|e| e.questions.len()).sum();
    let discarded: usize = graph.edges.iter().map(|e| e.discarded_count).sum();
    let generated = retained + discarded;
    let mut histogram = BTreeMap::new();
    for q in graph.edges.iter().flat_map(|e| e.questions.iter()) {
        *histogram.entry(question_type(&q.text)).or_insert(0) += 1;
    }
    let mean_node_degree = if graph.nodes.is_empty() {
        0.0
    } else {
        (2 * retained) as f64 / graph.nodes.len() as f64
    };
    GraphStats {
        node_count: graph.nodes.len(),
        edge_count: graph.edges.len(),
        retained_questions: retained,
        generated_questions: generated,
        mean_node_degree,
        filter_rate: (generated > 0).then(|| discarded as f64 / generated as f64),
        question_type_histogram: histogram,
    }
}

/// Per-node degree (retained questions incident to each node).
pub fn node_degrees(graph: &NarrativeGraph) -> Vec<usize> {
    let mut degrees = alloc::vec![0; graph.nodes.len()];
    for edge in &graph.edges {
        let n = edge.questions.len();
        if let Some(d) = degrees.get_mut(edge.source) {
            *d += n;
        }
        if let Some(d) = degrees.get_mut(edge.target) {
            *d += n;
        }
    }
    degrees
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::edge::{Attribution, Evidence, Verdict};
    use alloc::vec;
    use proptest::prelude::*;

    fn question(text: &str, pair: (usize, usize)) -> Question {
        Question {
            text: text.into(),
            source_pair: pair,
            claim_ref: 0,
            verdict: Verdict::Retained,
            answer: None,
            evidence: vec![Evidence {
                sentence: "s".into(),
                source: Attribution::Prior,
            }],
        }
    }

    fn nodes(n: usize) -> Vec<Node> {
        (0..n)
            .map(|i| Node::from_passage(i, &alloc::format!("Passage {i} text."), 240))
            .collect()
    }

    #[test]
    fn two_nodes_one_edge_two_questions() {
        let mut g = NarrativeGraph::new(nodes(2));
        g.edges.push(Edge {
            source: 0,
            target: 1,
            questions: vec![question("What happened?", (0, 1)), question("Why?", (0, 1))],
            discarded_count: 0,
        });
        let s = g.stats();
        assert_eq!(s.mean_node_degree, 2.0);
        assert_eq!(node_degrees(&g), vec![2, 2]);
        assert_eq!(s.question_type_histogram.get("what"), Some(&1));
        assert_eq!(s.question_type_histogram.get("why"), Some(&1));
    }

    #[test]
    fn no_edges() {
        let g = NarrativeGraph::new(nodes(3));
        let s = g.stats();
        assert_eq!(s.mean_node_degree, 0.0);
        assert_eq!(s.filter_rate, None);
    }

    #[test]
    fn filter_rate_nine_of_nineteen() {
        let mut g = NarrativeGraph::new(nodes(2));
        let qs = (0..10).map(|_| question("What?", (0, 1))).collect();
        g.edges.push(Edge {
            source: 0,
            target: 1,
            questions: qs,
            discarded_count: 9,
        });
        let rate = g.stats().filter_rate.unwrap();
        assert!((rate - 9.0 / 19.0).abs() < 1e-12);
        assert!((rate - 0.4737).abs() < 1e-4);
    }

    #[test]
    fn question_types() {
        assert_eq!(question_type("What prompted the Watch?"), "what");
        assert_eq!(question_type("In the end, why did he go?"), "why");
        assert_eq!(question_type("Tell me."), "other");
    }

    #[test]
    fn empty_graph_round_trips() {
        let g = NarrativeGraph::new(Vec::new());
        assert_eq!(NarrativeGraph::from_jsonl(&g.to_jsonl()).unwrap(), g);
    }

    #[test]
    fn unknown_version_is_rejected() {
        let mut g = NarrativeGraph::new(nodes(1));
        g.meta.format_version = "narco/99".into();
        assert_eq!(
            NarrativeGraph::from_jsonl(&g.to_jsonl()),
            Err(GraphError::VersionMismatch {
                found: "narco/99".into()
            })
        );
    }

    #[test]
    fn corrupt_payloads() {
        assert!(matches!(
            NarrativeGraph::from_jsonl(""),
            Err(GraphError::CorruptPayload(_))
        ));
        let g = NarrativeGraph::new(nodes(2));
        let mut text = g.to_jsonl();
        text.push_str("{\"section\":\"edge\",\"source\":1,\"target\":0,\"questions\":[],\"discarded_count\":0}\n");
        assert!(matches!(
            NarrativeGraph::from_jsonl(&text),
            Err(GraphError::CorruptPayload(_))
        ));
        assert!(matches!(
            NarrativeGraph::from_jsonl("{\"section\":\"meta\",\"format_version\":\"narco/1\"}\nnot json"),
            Err(GraphError::CorruptPayload(_))
        ));
    }

    fn arb_graph() -> impl Strategy<Value = NarrativeGraph> {
        (1usize..7)
            .prop_flat_map(|n| {
                let pairs: Vec<(usize, usize)> = (0..n).flat_map(|j| (0..j).map(move |i| (i, j))).collect();
                let edges = prop::sample::subsequence(pairs.clone(), 0..=pairs.len()).prop_flat_map(|chosen| {
                    let k = chosen.len();
                    (Just(chosen), prop::collection::vec((0usize..4, 0usize..4), k))
                });
                (Just(n), edges)
            })
            .prop_map(|(n, (pairs, counts))| {
                let mut g = NarrativeGraph::new(nodes(n));
                g.meta.window = Some(4);
                g.meta.cap = 4;
                for ((i, j), (kept, dropped)) in pairs.into_iter().zip(counts) {
                    let questions = (0..kept)
                        .map(|q| question(&alloc::format!("Why {i} {j} {q}?"), (i, j)))
                        .collect();
                    g.edges.push(Edge {
                        source: i,
                        target: j,
                        questions,
                        discarded_count: dropped,
                    });
                }
                g.canonicalize();
                g
            })
    }

    proptest! {
        #[test]
        fn round_trip_and_invariants(g in arb_graph()) {
            let text = g.to_jsonl();
            let back = NarrativeGraph::from_jsonl(&text).unwrap();
            prop_assert_eq!(&back, &g);
            prop_assert_eq!(back.to_jsonl(), text);

            let s = g.stats();
            let degree_sum: usize = node_degrees(&g).iter().sum();
            prop_assert_eq!(degree_sum, 2 * s.retained_questions);
            prop_assert_eq!(s.question_type_histogram.values().sum::<usize>(), s.retained_questions);
            if let Some(rate) = s.filter_rate {
                prop_assert!((0.0..=1.0).contains(&rate));
            }
        }

        #[test]
        fn serialization_ignores_edge_order(g in arb_graph()) {
            let mut shuffled = g.clone();
            shuffled.edges.reverse();
            prop_assert_eq!(shuffled.to_jsonl(), g.to_jsonl());
        }
    }
}
