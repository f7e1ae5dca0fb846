//! Input records and file helpers.

use std::collections::BTreeSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use narco_core::chunking::{chunk_text, Node};
use narco_core::graph::NarrativeGraph;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum InputError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}: {message}")]
    Invalid { path: PathBuf, message: String },
}

impl InputError {
    fn invalid(path: &Path, message: impl Into<String>) -> Self {
        InputError::Invalid {
            path: path.to_path_buf(),
            message: message.into(),
        }
    }
}

pub fn read_text(path: &Path) -> Result<String, InputError> {
    fs::read_to_string(path).map_err(|source| InputError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// One record per non-blank line.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, InputError> {
    let text = read_text(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record = serde_json::from_str(line).map_err(|e| InputError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, InputError> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| InputError::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: e.to_string(),
    })
}

pub fn read_graph(path: &Path) -> Result<NarrativeGraph, InputError> {
    let text = read_text(path)?;
    let graph = NarrativeGraph::from_jsonl(&text).map_err(|e| InputError::invalid(path, e.to_string()))?;
    Ok(graph)
}

/// Write via a temporary file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

/// A pre-chunked passage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: usize,
    pub text: String,
}

/// Nodes from passages whose ids run 0, 1, 2, ... in file order.
pub fn corpus_nodes(path: &Path, max_words: usize) -> Result<Vec<Node>, InputError> {
    let records: Vec<CorpusRecord> = read_jsonl(path)?;
    records
        .iter()
        .enumerate()
        .map(|(pos, r)| {
            if r.id != pos {
                return Err(InputError::invalid(
                    path,
                    format!("record {pos} has id {}; ids must be 0, 1, 2, ...", r.id),
                ));
            }
            Ok(Node::from_passage(r.id, &r.text, max_words))
        })
        .collect()
}

pub fn text_nodes(path: &Path, max_words: usize) -> Result<Vec<Node>, InputError> {
    Ok(chunk_text(&read_text(path)?, max_words))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub query_id: String,
    pub text: String,
    #[serde(default)]
    pub positives: BTreeSet<usize>,
}

pub fn read_queries(path: &Path, node_count: usize) -> Result<Vec<QueryRecord>, InputError> {
    let queries: Vec<QueryRecord> = read_jsonl(path)?;
    for q in &queries {
        if let Some(&p) = q.positives.iter().find(|&&p| p >= node_count) {
            return Err(InputError::invalid(
                path,
                format!(
                    "query {}: positive {p} is not a node id (graph has {node_count} nodes)",
                    q.query_id
                ),
            ));
        }
    }
    Ok(queries)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecapCandidateRecord {
    pub id: usize,
    pub text: String,
}

/// Candidate ids are document positions; the target follows every candidate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecapInstanceRecord {
    pub target_text: String,
    #[serde(default)]
    pub target_id: Option<usize>,
    pub candidates: Vec<RecapCandidateRecord>,
    #[serde(default)]
    pub gold: BTreeSet<usize>,
    #[serde(default)]
    pub baseline: BTreeSet<usize>,
}

impl RecapInstanceRecord {
    pub fn target_position(&self) -> usize {
        self.target_id
            .unwrap_or_else(|| self.candidates.iter().map(|c| c.id + 1).max().unwrap_or(0))
    }

    pub fn validate(&self, path: &Path) -> Result<(), InputError> {
        let ids: BTreeSet<usize> = self.candidates.iter().map(|c| c.id).collect();
        if ids.len() != self.candidates.len() {
            return Err(InputError::invalid(path, "candidate ids must be unique"));
        }
        if self.candidates.is_empty() {
            return Err(InputError::invalid(path, "candidates must not be empty"));
        }
        let target = self.target_position();
        if let Some(c) = self.candidates.iter().find(|c| c.id >= target) {
            return Err(InputError::invalid(
                path,
                format!("candidate {} does not precede target {target}", c.id),
            ));
        }
        for (name, set) in [("gold", &self.gold), ("baseline", &self.baseline)] {
            if let Some(g) = set.iter().find(|g| !ids.contains(g)) {
                return Err(InputError::invalid(path, format!("{name} id {g} is not a candidate")));
            }
        }
        Ok(())
    }
}

/// `[[source, target], ...]`.
pub fn read_pairs(path: &Path) -> Result<Vec<(usize, usize)>, InputError> {
    read_json(path)
}
