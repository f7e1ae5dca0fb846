//! Recap candidate ranking from edge relations, edge degrees and a baseline
//! selection.
//!
//! Each candidate gets a relation rank (from an LLM score of its questions), a
//! degree rank (from its question count) and a baseline bit. The final score
//! is `alpha * r_rel + beta * r_deg - lambda * [selected]`; lower is better.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use alloc::{format, vec};
use core::cmp::Ordering;
use serde::{Deserialize, Serialize};

use crate::chat::{ChatBackend, ChatRequest, GatewayError, Message};
use crate::chunking::Node;
use crate::graph::Edge;
use crate::prompts;

pub const MAX_RELATION_SCORE: u8 = 5;
pub const DEFAULT_K: usize = 5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecapCandidate {
    pub node: Node,
    /// Edge from this candidate to the target.
    pub edge: Edge,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecapInstance {
    pub target: Node,
    pub candidates: Vec<RecapCandidate>,
    #[serde(default)]
    pub gold: BTreeSet<usize>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RecapError {
    #[error("candidate {candidate}: edge does not point at the target node {target}")]
    EdgeMismatch { candidate: usize, target: usize },
    #[error("invalid recap config: {0}")]
    InvalidConfig(String),
    #[error("no relation score for candidate {0}")]
    MissingScore(usize),
    #[error("malformed relation score reply after reprompt: {0:?}")]
    MalformedResponse(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

impl RecapInstance {
    pub fn validate(&self) -> Result<(), RecapError> {
        for c in &self.candidates {
            if c.edge.target != self.target.id || c.edge.source != c.node.id {
                return Err(RecapError::EdgeMismatch {
                    candidate: c.node.id,
                    target: self.target.id,
                });
            }
        }
        Ok(())
    }

    /// Distance from a candidate to the target in node ids (smaller is closer).
    fn distance(&self, candidate: &RecapCandidate) -> usize {
        self.target.id.abs_diff(candidate.node.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RecapConfig {
    pub alpha: f64,
    pub beta: f64,
    pub lambda: f64,
    pub k: usize,
}

impl Default for RecapConfig {
    fn default() -> Self {
        RecapConfig {
            alpha: 1.0,
            beta: 1.0,
            lambda: 2.0,
            k: DEFAULT_K,
        }
    }
}

impl RecapConfig {
    pub fn validate(&self) -> Result<(), RecapError> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta), ("lambda", self.lambda)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(RecapError::InvalidConfig(format!("{name} must be finite and >= 0")));
            }
        }
        if self.alpha == 0.0 && self.beta == 0.0 && self.lambda == 0.0 {
            return Err(RecapError::InvalidConfig("alpha, beta and lambda are all zero".into()));
        }
        if self.k == 0 {
            return Err(RecapError::InvalidConfig("k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationScore {
    pub candidate_id: usize,
    pub value: u8,
    pub raw_llm_output: String,
}

/// Parse the first integer in a reply. Out-of-range values are clamped to
/// `[0, 5]`; `None` if there is no integer at all.
pub fn parse_relation_score(reply: &str) -> Option<(u8, bool)> {
    let bytes = reply.as_bytes();
    let start = bytes.iter().position(u8::is_ascii_digit)?;
    let negative = start > 0 && bytes[start - 1] == b'-';
    let digits: String = reply[start..].chars().take_while(char::is_ascii_digit).collect();
    let value: u64 = digits.parse().unwrap_or(u64::MAX);
    if negative && value > 0 {
        return Some((0, true));
    }
    if value > MAX_RELATION_SCORE as u64 {
        return Some((MAX_RELATION_SCORE, true));
    }
    Some((value as u8, false))
}

/// Score every candidate's question set against the target.
///
/// Candidates with empty edges score 0 without a model call. Only the target
/// text and the questions are sent; candidate text never is.
pub fn score_relations<B: ChatBackend>(
    instance: &RecapInstance,
    backend: &B,
    model: &str,
) -> Result<Vec<RelationScore>, RecapError> {
    instance.validate()?;
    let target = instance.target.text();
    let mut out = Vec::with_capacity(instance.candidates.len());
    for c in &instance.candidates {
        if c.edge.is_empty() {
            out.push(RelationScore {
                candidate_id: c.node.id,
                value: 0,
                raw_llm_output: String::new(),
            });
            continue;
        }
        let questions: String = c
            .edge
            .questions
            .iter()
            .enumerate()
            .map(|(i, q)| format!("{}. {}\n", i + 1, q.text))
            .collect();
        let mut messages = vec![
            Message::system(prompts::SYSTEM.render(&[])),
            Message::user(prompts::RELATION_SCORE.render(&[("target", &target), ("questions", questions.trim_end())])),
        ];
        let mut reply = backend.complete(&ChatRequest::new(model, messages.clone()))?.content;
        let mut parsed = parse_relation_score(&reply);
        if parsed.is_none() {
            messages.push(Message::assistant(reply.clone()));
            messages.push(Message::user(prompts::FORMAT_REMINDER.render(&[])));
            reply = backend.complete(&ChatRequest::new(model, messages))?.content;
            parsed = parse_relation_score(&reply);
        }
        let (value, clamped) = parsed.ok_or_else(|| RecapError::MalformedResponse(reply.clone()))?;
        if clamped {
            log::warn!(
                "relation score for candidate {} out of range, clamped to {value}: {reply:?}",
                c.node.id
            );
        }
        out.push(RelationScore {
            candidate_id: c.node.id,
            value,
            raw_llm_output: reply,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedCandidate {
    pub id: usize,
    pub score: f64,
    pub relation_rank: usize,
    pub degree_rank: usize,
    pub baseline: bool,
}

/// Dense ranks, descending: the highest value gets 1, equal values share a
/// rank and the next distinct value gets the next integer.
pub fn dense_rank_desc(values: &[u64]) -> Vec<usize> {
    let mut distinct: Vec<u64> = values.to_vec();
    distinct.sort_unstable_by(|a, b| b.cmp(a));
    distinct.dedup();
    values
        .iter()
        .map(|v| distinct.iter().position(|d| d == v).unwrap_or(0) + 1)
        .collect()
}

/// Rank candidates by the interpolated score, ascending.
pub fn rank_candidates(
    instance: &RecapInstance,
    relation_scores: &[RelationScore],
    baseline_selection: &BTreeSet<usize>,
    config: &RecapConfig,
) -> Result<Vec<RankedCandidate>, RecapError> {
    config.validate()?;
    instance.validate()?;
    let n = instance.candidates.len();
    let mut rel = Vec::with_capacity(n);
    for c in &instance.candidates {
        let score = relation_scores
            .iter()
            .find(|s| s.candidate_id == c.node.id)
            .ok_or(RecapError::MissingScore(c.node.id))?;
        rel.push(score.value as u64);
    }
    let relation_rank = dense_rank_desc(&rel);

    // degree rank: ordinal, more questions first, closer candidates first on ties
    let mut by_degree: Vec<usize> = (0..n).collect();
    by_degree.sort_by(|&a, &b| {
        let (ca, cb) = (&instance.candidates[a], &instance.candidates[b]);
        cb.edge
            .questions
            .len()
            .cmp(&ca.edge.questions.len())
            .then(instance.distance(ca).cmp(&instance.distance(cb)))
            .then(ca.node.id.cmp(&cb.node.id))
    });
    let mut degree_rank = vec![0; n];
    for (pos, &idx) in by_degree.iter().enumerate() {
        degree_rank[idx] = pos + 1;
    }

    let mut ranked: Vec<(usize, RankedCandidate)> = instance
        .candidates
        .iter()
        .enumerate()
        .map(|(idx, c)| {
            let baseline = baseline_selection.contains(&c.node.id);
            let score = config.alpha * relation_rank[idx] as f64 + config.beta * degree_rank[idx] as f64
                - if baseline { config.lambda } else { 0.0 };
            (
                instance.distance(c),
                RankedCandidate {
                    id: c.node.id,
                    score,
                    relation_rank: relation_rank[idx],
                    degree_rank: degree_rank[idx],
                    baseline,
                },
            )
        })
        .collect();
    ranked.sort_by(|(da, a), (db, b)| {
        a.score
            .partial_cmp(&b.score)
            .unwrap_or(Ordering::Equal)
            .then(da.cmp(db))
            .then(a.id.cmp(&b.id))
    });
    Ok(ranked.into_iter().map(|(_, r)| r).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PrfScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when the gold set was empty; all scores are then 0.
    pub gold_empty: bool,
}

/// Precision, recall and F1 of the first `k` entries of `ranked` against
/// `gold`. Precision divides by the number of entries actually selected.
///
/// # Panics
///
/// Panics if `k` is zero.
pub fn f1_at_k<T: Ord>(ranked: &[T], gold: &BTreeSet<T>, k: usize) -> PrfScores {
    assert!(k >= 1, "k must be at least 1");
    if gold.is_empty() {
        return PrfScores {
            precision: 0.0,
            recall: 0.0,
            f1: 0.0,
            gold_empty: true,
        };
    }
    let selected = &ranked[..k.min(ranked.len())];
    let hits = selected.iter().filter(|id| gold.contains(id)).count() as f64;
    let precision = if selected.is_empty() {
        0.0
    } else {
        hits / selected.len() as f64
    };
    let recall = hits / gold.len() as f64;
    let f1 = if hits == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    PrfScores {
        precision,
        recall,
        f1,
        gold_empty: false,
    }
}

impl RankedCandidate {
    pub fn ids(ranked: &[RankedCandidate]) -> Vec<usize> {
        ranked.iter().map(|r| r.id).collect()
    }
}
