//! Sentence segmentation and greedy word-budget chunking.
//!
//! Blank lines are hard boundaries: a sentence never crosses a paragraph
//! break and neither does a node. Inside a paragraph sentences are packed
//! left to right into nodes of at most `max_words` words. A sentence longer
//! than the budget is never split; it becomes its own node and the node is
//! flagged as oversize.

use alloc::string::String;
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

use crate::text::{collapse_whitespace, word_count};

/// Default per-node word budget.
pub const DEFAULT_MAX_WORDS: usize = 240;

/// Words that end in a period without ending the sentence.
const ABBREVIATIONS: &[&str] = &[
    "mr", "mrs", "ms", "mme", "mlle", "messrs", "dr", "prof", "sr", "jr", "st", "mt", "capt", "col", "gen", "lt",
    "sgt", "cpl", "adm", "rev", "hon", "gov", "pres", "vs", "e.g", "i.e", "cf", "approx", "fig", "vol", "ch",
];

const TERMINATORS: &[char] = &['.', '!', '?', '…'];
const CLOSERS: &[char] = &['"', '\'', ')', ']', '}', '”', '’', '»'];

/// One sentence of the source text.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    /// Source slice with whitespace collapsed.
    pub text: String,
    /// Byte offsets `(start, end)` into the source.
    pub span: (usize, usize),
    /// Ordinal among all sentences of the source.
    pub index: usize,
    /// Ordinal of the paragraph the sentence belongs to.
    pub paragraph: usize,
}

/// A graph node: consecutive sentences from one paragraph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Node {
    pub id: usize,
    pub sentences: Vec<Sentence>,
    pub word_count: usize,
    pub oversize: bool,
}

impl Node {
    /// Build a node directly from a passage, e.g. a pre-chunked corpus record.
    pub fn from_passage(id: usize, passage: &str, max_words: usize) -> Node {
        let sentences = split_sentences(passage);
        let word_count = sentences.iter().map(|s| word_count(&s.text)).sum();
        Node {
            id,
            oversize: word_count > max_words,
            sentences,
            word_count,
        }
    }

    /// Sentence texts joined by single spaces.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for s in &self.sentences {
            if !out.is_empty() {
                out.push(' ');
            }
            out.push_str(&s.text);
        }
        out
    }
}

/// Join node texts with blank lines, the inverse of [`chunk_text`] up to
/// whitespace normalization.
pub fn join_nodes(nodes: &[Node]) -> String {
    let mut out = String::new();
    for node in nodes {
        if !out.is_empty() {
            out.push_str("\n\n");
        }
        out.push_str(&node.text());
    }
    out
}

/// Byte ranges of paragraphs, separated by lines that are empty or blank.
fn paragraphs(text: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start: Option<usize> = None;
    let mut end = 0;
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let line_start = offset;
        offset += line.len();
        if line.trim().is_empty() {
            if let Some(s) = start.take() {
                out.push((s, end));
            }
        } else {
            if start.is_none() {
                start = Some(line_start);
            }
            end = line_start + line.trim_end().len();
        }
    }
    if let Some(s) = start {
        out.push((s, end));
    }
    out
}

fn is_abbreviation(word: &str) -> bool {
    let word = word.trim_start_matches(|c: char| !c.is_alphanumeric());
    let lower: String = word.chars().flat_map(char::to_lowercase).collect();
    ABBREVIATIONS.contains(&lower.as_str())
}

/// Split `text` into sentences. Every non-whitespace character of the input
/// belongs to exactly one sentence.
pub fn split_sentences(text: &str) -> Vec<Sentence> {
    let mut out = Vec::new();
    for (paragraph, (p_start, p_end)) in paragraphs(text).into_iter().enumerate() {
        let para = &text[p_start..p_end];
        let chars: Vec<(usize, char)> = para.char_indices().collect();
        let mut sent_start: Option<usize> = None;
        let mut i = 0;
        while i < chars.len() {
            let (pos, ch) = chars[i];
            if sent_start.is_none() {
                if ch.is_whitespace() {
                    i += 1;
                    continue;
                }
                sent_start = Some(pos);
            }
            if !TERMINATORS.contains(&ch) {
                i += 1;
                continue;
            }
            // absorb the run of terminators and closing quotes/brackets
            let mut j = i;
            let mut only_period = true;
            while j < chars.len() && TERMINATORS.contains(&chars[j].1) {
                only_period &= chars[j].1 == '.';
                j += 1;
            }
            let run_len = j - i;
            while j < chars.len() && CLOSERS.contains(&chars[j].1) {
                j += 1;
            }
            let at_end = j == chars.len();
            if !at_end && !chars[j].1.is_whitespace() {
                i = j;
                continue;
            }
            if only_period && run_len == 1 {
                let start = sent_start.unwrap_or(pos);
                let word_start = para[start..pos]
                    .rfind(char::is_whitespace)
                    .map_or(start, |w| start + w + 1);
                let next = chars[j..].iter().find(|(_, c)| !c.is_whitespace());
                let continues_lower = next.is_some_and(|(_, c)| c.is_lowercase());
                if is_abbreviation(&para[word_start..pos]) || continues_lower {
                    i = j;
                    continue;
                }
            }
            let end = if at_end { para.len() } else { chars[j].0 };
            push_sentence(&mut out, text, p_start, sent_start.take(), end, paragraph);
            i = j;
        }
        push_sentence(&mut out, text, p_start, sent_start, para.len(), paragraph);
    }
    out
}

fn push_sentence(out: &mut Vec<Sentence>, text: &str, base: usize, start: Option<usize>, end: usize, paragraph: usize) {
    let Some(start) = start else { return };
    let slice = &text[base + start..base + end];
    let trimmed_end = start + slice.trim_end().len();
    if trimmed_end <= start {
        return;
    }
    out.push(Sentence {
        text: collapse_whitespace(slice),
        span: (base + start, base + trimmed_end),
        index: out.len(),
        paragraph,
    });
}

/// Chunk `text` into nodes of at most `max_words` words.
///
/// # Panics
///
/// Panics if `max_words` is zero.
pub fn chunk_text(text: &str, max_words: usize) -> Vec<Node> {
    assert!(max_words >= 1, "max_words must be at least 1");
    let mut nodes: Vec<Node> = Vec::new();
    let mut current: Vec<Sentence> = Vec::new();
    let mut current_words = 0;
    let mut current_paragraph = None;

    fn flush(nodes: &mut Vec<Node>, current: &mut Vec<Sentence>, words: &mut usize, oversize: bool) {
        if current.is_empty() {
            return;
        }
        nodes.push(Node {
            id: nodes.len(),
            sentences: core::mem::take(current),
            word_count: *words,
            oversize,
        });
        *words = 0;
    }

    for sentence in split_sentences(text) {
        let words = word_count(&sentence.text);
        if current_paragraph != Some(sentence.paragraph) {
            flush(&mut nodes, &mut current, &mut current_words, false);
            current_paragraph = Some(sentence.paragraph);
        }
        if words > max_words {
            flush(&mut nodes, &mut current, &mut current_words, false);
            current.push(sentence);
            current_words = words;
            flush(&mut nodes, &mut current, &mut current_words, true);
            continue;
        }
        if current_words + words > max_words {
            flush(&mut nodes, &mut current, &mut current_words, false);
        }
        current.push(sentence);
        current_words += words;
    }
    flush(&mut nodes, &mut current, &mut current_words, false);
    nodes
}
