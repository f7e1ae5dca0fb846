//! Context assembly for multi-choice questions over a long document, and
//! answer scoring.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::graph::NarrativeGraph;
use crate::prompts;
use crate::retrieval::{retrieve, EmbeddingProvider, FusionConfig, RetrievalError};
use crate::text::{first_words, word_count};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McOption {
    pub label: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MCQuestion {
    pub stem: String,
    pub options: Vec<McOption>,
    #[serde(default)]
    pub gold: Option<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QaError {
    #[error("invalid question: {0}")]
    InvalidQuestion(String),
    #[error("graph has no nodes")]
    EmptyGraph,
    #[error("context budget must be at least one word")]
    InvalidBudget,
    #[error("question {index} has no gold label")]
    MissingGold { index: usize },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
}

impl MCQuestion {
    pub fn validate(&self) -> Result<(), QaError> {
        if self.options.len() < 2 {
            return Err(QaError::InvalidQuestion(format!(
                "expected at least 2 options, found {}",
                self.options.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for o in &self.options {
            if o.label.trim().is_empty() {
                return Err(QaError::InvalidQuestion("empty option label".into()));
            }
            if !seen.insert(o.label.as_str()) {
                return Err(QaError::InvalidQuestion(format!(
                    "duplicate option label {:?}",
                    o.label
                )));
            }
        }
        if let Some(g) = &self.gold {
            if !seen.contains(g.as_str()) {
                return Err(QaError::InvalidQuestion(format!("gold label {g:?} is not an option")));
            }
        }
        Ok(())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.options.iter().map(|o| o.label.as_str())
    }

    /// Stem, optionally followed by the option texts.
    pub fn retrieval_query(&self, include_options: bool) -> String {
        if !include_options {
            return self.stem.clone();
        }
        let mut q = self.stem.clone();
        for o in &self.options {
            q.push(' ');
            q.push_str(&o.text);
        }
        q
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    pub max_words: usize,
}

impl ContextBudget {
    pub fn new(max_words: usize) -> Result<Self, QaError> {
        if max_words == 0 {
            return Err(QaError::InvalidBudget);
        }
        Ok(ContextBudget { max_words })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    /// Admitted node ids in ascending order.
    pub nodes: Vec<usize>,
    /// Set when the top node alone exceeded the budget and was cut.
    pub truncated: bool,
}

/// Admit nodes in rank order while the running word total fits the budget;
/// stops at the first node that does not fit. When not even the top node
/// fits, it is admitted alone and flagged for truncation.
pub fn select_context(ranking: &[usize], word_counts: &[usize], budget: ContextBudget) -> Selection {
    let mut nodes = Vec::new();
    let mut used = 0usize;
    for &id in ranking {
        let w = word_counts[id];
        if used + w > budget.max_words {
            break;
        }
        used += w;
        nodes.push(id);
    }
    let truncated = nodes.is_empty() && !ranking.is_empty();
    if truncated {
        nodes.push(ranking[0]);
    }
    nodes.sort_unstable();
    Selection { nodes, truncated }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledContext {
    pub text: String,
    pub nodes: Vec<usize>,
    pub truncated: bool,
    pub ranking: Vec<(usize, f64)>,
}

impl AssembledContext {
    pub fn word_count(&self) -> usize {
        word_count(&self.text)
    }
}

/// Concatenate the selected nodes of `ranking` in document order.
pub fn assemble_from_ranking(
    graph: &NarrativeGraph,
    ranking: Vec<(usize, f64)>,
    budget: ContextBudget,
) -> Result<AssembledContext, QaError> {
    if graph.nodes.is_empty() {
        return Err(QaError::EmptyGraph);
    }
    let counts: Vec<usize> = graph.nodes.iter().map(|n| n.word_count).collect();
    let ids: Vec<usize> = ranking.iter().map(|r| r.0).collect();
    let sel = select_context(&ids, &counts, budget);
    let text = if sel.truncated {
        first_words(&graph.nodes[sel.nodes[0]].text(), budget.max_words)
    } else {
        sel.nodes
            .iter()
            .map(|&i| graph.nodes[i].text())
            .collect::<Vec<_>>()
            .join("\n\n")
    };
    Ok(AssembledContext {
        text,
        nodes: sel.nodes,
        truncated: sel.truncated,
        ranking,
    })
}

/// Retrieve nodes for the question and assemble them under the budget.
pub fn assemble_context<P: EmbeddingProvider + ?Sized>(
    question: &MCQuestion,
    graph: &NarrativeGraph,
    provider: &P,
    fusion: &FusionConfig,
    budget: ContextBudget,
    include_options: bool,
) -> Result<AssembledContext, QaError> {
    question.validate()?;
    if graph.nodes.is_empty() {
        return Err(QaError::EmptyGraph);
    }
    let query = question.retrieval_query(include_options);
    let ranking = retrieve(&query, graph, provider, fusion, graph.nodes.len())?;
    assemble_from_ranking(graph, ranking, budget)
}

pub fn render_qa_prompt(context: &str, question: &MCQuestion) -> String {
    let options = question
        .options
        .iter()
        .map(|o| format!("({}) {}", o.label, o.text))
        .collect::<Vec<_>>()
        .join("\n");
    prompts::QA.render(&[("context", context), ("stem", &question.stem), ("options", &options)])
}

pub trait LabelParser {
    /// The option label the reply commits to, if any.
    fn parse(&self, reply: &str, labels: &[&str]) -> Option<String>;
}

/// First bracketed label such as `(B)` or `[B]`; failing that, the first
/// token equal to a label after trimming surrounding punctuation.
/// Matching is case-sensitive.
#[derive(Debug, Clone, Copy, Default)]
pub struct OptionLabelParser;

impl LabelParser for OptionLabelParser {
    fn parse(&self, reply: &str, labels: &[&str]) -> Option<String> {
        let mut best: Option<(usize, &str)> = None;
        for &label in labels {
            for (open, close) in [("(", ")"), ("[", "]")] {
                let pat = format!("{open}{label}{close}");
                if let Some(pos) = reply.find(&pat) {
                    if best.is_none_or(|(p, _)| pos < p) {
                        best = Some((pos, label));
                    }
                }
            }
        }
        if let Some((_, label)) = best {
            return Some(label.to_string());
        }
        reply
            .split_whitespace()
            .map(|t| t.trim_matches(|c: char| !c.is_alphanumeric()))
            .find(|t| labels.contains(t))
            .map(ToString::to_string)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub unparsed: usize,
}

/// Share of replies whose parsed label equals the gold label. Unparseable
/// replies count as wrong.
pub fn answer_accuracy<P: LabelParser + ?Sized>(
    transcripts: &[(MCQuestion, String)],
    parser: &P,
) -> Result<AccuracyReport, QaError> {
    let mut correct = 0;
    let mut unparsed = 0;
    for (index, (q, reply)) in transcripts.iter().enumerate() {
        let gold = q.gold.as_deref().ok_or(QaError::MissingGold { index })?;
        let labels: Vec<&str> = q.labels().collect();
        match parser.parse(reply, &labels) {
            Some(l) if l == gold => correct += 1,
            Some(_) => {}
            None => unparsed += 1,
        }
    }
    let total = transcripts.len();
    let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
    Ok(AccuracyReport {
        accuracy,
        correct,
        total,
        unparsed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chunking::Node;
    use alloc::vec;

    fn question(gold: Option<&str>) -> MCQuestion {
        MCQuestion {
            stem: "Who found the key?".into(),
            options: ["A", "B", "C", "D"]
                .iter()
                .map(|l| McOption {
                    label: l.to_string(),
                    text: format!("option {l}"),
                })
                .collect(),
            gold: gold.map(Into::into),
        }
    }

    fn graph(sizes: &[usize]) -> NarrativeGraph {
        let nodes = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| {
                let words: Vec<String> = (0..n).map(|w| format!("n{i}w{w}")).collect();
                Node::from_passage(i, &(words.join(" ") + "."), 10_000)
            })
            .collect();
        NarrativeGraph::new(nodes)
    }

    #[test]
    fn question_validation() {
        assert!(question(Some("B")).validate().is_ok());
        let mut q = question(None);
        q.options.truncate(1);
        assert!(q.validate().is_err());
        let mut q = question(None);
        q.options[1].label = "A".into();
        assert!(q.validate().is_err());
        assert!(question(Some("E")).validate().is_err());
    }

    #[test]
    fn emits_in_document_order() {
        let g = graph(&[5; 10]);
        let ranking = vec![(7, 0.9), (3, 0.8), (1, 0.7)];
        let ctx = assemble_from_ranking(&g, ranking, ContextBudget::new(10).unwrap()).unwrap();
        assert_eq!(ctx.nodes, vec![3, 7]);
        assert!(ctx.text.starts_with("n3w0"));
        assert!(ctx.text.contains("\n\nn7w0"));
        assert!(!ctx.truncated);
    }

    #[test]
    fn greedy_stops_at_first_misfit() {
        let sel = select_context(&[0, 1, 2], &[3, 10, 1], ContextBudget::new(5).unwrap());
        assert_eq!(sel.nodes, vec![0]);
    }

    #[test]
    fn whole_document_fits() {
        let g = graph(&[4, 6, 2]);
        let ranking = vec![(2, 0.5), (0, 0.4), (1, 0.1)];
        let ctx = assemble_from_ranking(&g, ranking, ContextBudget::new(1000).unwrap()).unwrap();
        assert_eq!(ctx.nodes, vec![0, 1, 2]);
        assert_eq!(ctx.word_count(), 12);
    }

    #[test]
    fn tiny_budget_truncates_top_node() {
        let g = graph(&[8, 9]);
        let ctx = assemble_from_ranking(&g, vec![(1, 0.9), (0, 0.1)], ContextBudget::new(3).unwrap()).unwrap();
        assert!(ctx.truncated);
        assert_eq!(ctx.nodes, vec![1]);
        assert_eq!(ctx.text, "n1w0 n1w1 n1w2");
    }

    #[test]
    fn empty_graph_and_zero_budget() {
        let g = NarrativeGraph::new(vec![]);
        assert_eq!(
            assemble_from_ranking(&g, vec![], ContextBudget { max_words: 5 }).unwrap_err(),
            QaError::EmptyGraph
        );
        assert_eq!(ContextBudget::new(0).unwrap_err(), QaError::InvalidBudget);
    }

    #[test]
    fn label_parsing() {
        let p = OptionLabelParser;
        let labels = ["A", "B", "C", "D"];
        assert_eq!(p.parse("The answer is (B).", &labels).as_deref(), Some("B"));
        assert_eq!(p.parse("C", &labels).as_deref(), Some("C"));
        assert_eq!(p.parse("I think D, not (A)", &labels).as_deref(), Some("A"));
        assert_eq!(p.parse("Answer: D.", &labels).as_deref(), Some("D"));
        assert_eq!(p.parse("no idea", &labels), None);
        assert_eq!(p.parse("the answer is b", &labels), None);
    }

    #[test]
    fn accuracy_counts_unparsed_as_wrong() {
        let q = question(Some("B"));
        let transcripts = vec![
            (q.clone(), "The answer is (B).".to_string()),
            (q.clone(), "A".to_string()),
            (q.clone(), "hmm".to_string()),
            (q, "B".to_string()),
        ];
        let r = answer_accuracy(&transcripts, &OptionLabelParser).unwrap();
        assert_eq!(r.correct, 2);
        assert_eq!(r.unparsed, 1);
        assert!((r.accuracy - 0.5).abs() < 1e-15);
        let missing = vec![(question(None), "A".to_string())];
        assert_eq!(
            answer_accuracy(&missing, &OptionLabelParser).unwrap_err(),
            QaError::MissingGold { index: 0 }
        );
    }

    #[test]
    fn prompt_lists_options() {
        let p = render_qa_prompt("ctx here", &question(None));
        assert!(p.contains("ctx here"));
        assert!(p.contains("(C) option C"));
        assert!(p.contains("Who found the key?"));
    }
}
