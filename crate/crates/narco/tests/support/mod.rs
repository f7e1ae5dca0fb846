//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use narco::gateway::{ProviderConfig, Transport, TransportError};
use narco_core::chat::{ChatRequest, ChatResponse, Role};
use narco_core::chunking::split_sentences;
use sha2::{Digest, Sha256};

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn bin() -> PathBuf {
    PathBuf::from(env!("CARGO_BIN_EXE_narco"))
}

const STOP: &[&str] = &[
    "The", "She", "He", "It", "They", "When", "But", "And", "In", "On", "At", "A", "An", "Her", "His", "Then", "There",
    "This", "That", "By", "For", "As", "If", "Inside", "Beneath", "Near", "Through", "For", "One", "Its", "Before",
    "Under", "From", "With", "Wren's", "Ezra's", "Why", "What", "How", "Who", "Where",
];

fn hash(text: &str) -> u64 {
    let d = Sha256::digest(text.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Capitalized words that look like names or named things, in order.
fn terms(text: &str) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for raw in text.split_whitespace() {
        let w = raw.trim_matches(|c: char| !c.is_alphanumeric());
        let w = w.strip_suffix("'s").unwrap_or(w);
        if w.len() < 3 || !w.chars().next().is_some_and(char::is_uppercase) || STOP.contains(&w) {
            continue;
        }
        if !out.iter().any(|t| t == w) {
            out.push(w.to_string());
        }
    }
    out
}

/// Text inside each `"""` fence.
fn blocks(text: &str) -> Vec<String> {
    text.split("\"\"\"")
        .skip(1)
        .step_by(2)
        .map(|b| b.trim().to_string())
        .collect()
}

fn sentence_with(text: &str, term: &str, last: bool) -> Option<String> {
    let mut hits = split_sentences(text)
        .into_iter()
        .filter(|s| s.text.contains(term))
        .map(|s| s.text);
    if last {
        hits.next_back()
    } else {
        hits.next()
    }
}

/// A deterministic stand-in for a chat model that understands the bundled
/// prompt templates. Used only to record replay fixtures.
#[derive(Debug, Default)]
pub struct HeuristicResponder;

impl HeuristicResponder {
    pub fn reply(&self, request: &ChatRequest) -> String {
        let last = request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or_default();
        if last.starts_with("Below are two passages") {
            self.connections(last)
        } else if last.starts_with("Now turn each connection") {
            let previous = request.messages.iter().rev().find(|m| m.role == Role::Assistant);
            self.questions(previous.map(|m| m.content.as_str()).unwrap_or_default())
        } else if last.starts_with("Read the context and the question") {
            self.verify(last)
        } else if last.contains("Rate from 0 to 5") {
            self.relation(last)
        } else if last.starts_with("Read the excerpts") {
            self.answer(last)
        } else {
            "NONE".into()
        }
    }

    fn connections(&self, prompt: &str) -> String {
        let b = blocks(prompt);
        let (prior, current) = (&b[0], &b[1]);
        let cap: usize = prompt
            .split("at most ")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|n| n.parse().ok())
            .unwrap_or(4);
        let prior_terms = terms(prior);
        let shared: Vec<String> = terms(current)
            .into_iter()
            .filter(|t| prior_terms.contains(t))
            .take(cap)
            .collect();
        if shared.is_empty() {
            return "NONE".into();
        }
        let mut out = String::new();
        for (i, t) in shared.iter().enumerate() {
            let earlier = sentence_with(prior, t, false).unwrap_or_default();
            let later = sentence_with(current, t, false).unwrap_or_default();
            out.push_str(&format!(
                "{}. EARLIER: {earlier}\n   LATER: {later}\n   WHY: The later passage returns to {t}.\n",
                i + 1
            ));
        }
        out
    }

    fn questions(&self, claims: &str) -> String {
        let mut out = String::new();
        let mut n = 0;
        for line in claims.lines() {
            let Some(term) = line.trim().strip_prefix("WHY: The later passage returns to ") else {
                continue;
            };
            let term = term.trim_end_matches('.');
            n += 1;
            let q = match hash(term) % 4 {
                0 => format!("Why does {term} matter at this point in the story?"),
                1 => format!("What happened earlier involving {term}?"),
                2 => format!("How did {term} come to be part of these events?"),
                _ => format!("Who was connected to {term} before this scene?"),
            };
            out.push_str(&format!("{n}. {q}\n"));
        }
        if n == 0 {
            "NONE".into()
        } else {
            out
        }
    }

    fn verify(&self, prompt: &str) -> String {
        let context = blocks(prompt).into_iter().next().unwrap_or_default();
        let question = prompt
            .lines()
            .find_map(|l| l.strip_prefix("QUESTION: "))
            .unwrap_or_default();
        let term = terms(question).into_iter().next();
        let roll = hash(question) % 10;
        let evidence = term.and_then(|t| sentence_with(&context, &t, roll < 5));
        match evidence {
            Some(sentence) if roll >= 3 => {
                format!("ANSWERABLE: yes\nANSWER: See the cited sentence.\nEVIDENCE:\n- {sentence}")
            }
            _ => "ANSWERABLE: no\nANSWER:\nEVIDENCE:\n- none".into(),
        }
    }

    fn relation(&self, prompt: &str) -> String {
        let listed = prompt
            .split("QUESTIONS:")
            .nth(1)
            .unwrap_or_default()
            .lines()
            .take_while(|l| !l.starts_with("Rate"))
            .filter(|l| l.trim().chars().next().is_some_and(|c| c.is_ascii_digit()))
            .count() as u64;
        (listed + hash(prompt) % 3).min(5).to_string()
    }

    fn answer(&self, prompt: &str) -> String {
        let excerpts = blocks(prompt).into_iter().next().unwrap_or_default().to_lowercase();
        let options = prompt.split("OPTIONS:").nth(1).unwrap_or_default();
        let mut best: Option<(usize, String)> = None;
        for line in options.lines() {
            let Some(rest) = line.trim().strip_prefix('(') else {
                continue;
            };
            let Some((label, text)) = rest.split_once(") ") else {
                continue;
            };
            let score = text
                .split_whitespace()
                .map(|w| w.trim_matches(|c: char| !c.is_alphanumeric()).to_lowercase())
                .filter(|w| w.len() >= 4 && excerpts.contains(w.as_str()))
                .count();
            if best.as_ref().is_none_or(|(s, _)| score > *s) {
                best = Some((score, label.to_string()));
            }
        }
        match best {
            Some((_, label)) => format!("The answer is ({label})."),
            None => "I cannot tell.".into(),
        }
    }
}

impl Transport for HeuristicResponder {
    fn send(&self, _: &ProviderConfig, _: Option<&str>, request: &ChatRequest) -> Result<ChatResponse, TransportError> {
        let mut response = ChatResponse::complete(self.reply(request));
        response.provider_meta.insert("responder".into(), "heuristic".into());
        Ok(response)
    }
}
