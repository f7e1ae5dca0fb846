//! Edge realization: two-turn question generation followed by back
//! verification.
//!
//! Generation runs as one conversation. The first turn asks for concrete
//! details of the earlier node that set up events in the later node; the
//! second turn converts each listed connection into a question. Verification
//! then answers every candidate question over the two nodes concatenated
//! without a boundary marker, and the question is kept only when at least one
//! of the quoted evidence sentences comes from the earlier node.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};
use serde::{Deserialize, Serialize};

use crate::chat::{ChatBackend, ChatRequest, GatewayError, Message};
use crate::chunking::Node;
use crate::graph::Edge;
use crate::prompts;
use crate::text::normalize_for_match;

/// Maximum number of questions generated per node pair.
pub const DEFAULT_CAP: usize = 4;
/// Number of preceding nodes each node is paired with.
pub const DEFAULT_WINDOW: usize = 4;
/// Separator placed between the two halves of a verification context.
pub const CONTEXT_SEPARATOR: &str = "\n\n";
/// Character n-gram size for fuzzy evidence attribution.
pub const EVIDENCE_NGRAM: usize = 4;
/// Minimum n-gram overlap for a non-verbatim evidence sentence to count as
/// coming from a half.
pub const EVIDENCE_OVERLAP_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionClaim {
    pub prior_excerpt: String,
    pub event_in_current: String,
    pub explanation: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pending,
    Retained,
    DiscardedUnanswerable,
    DiscardedWrongSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribution {
    Prior,
    Current,
    Unmatched,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Evidence {
    pub sentence: String,
    pub source: Attribution,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Question {
    pub text: String,
    /// `(earlier, later)` node ids.
    pub source_pair: (usize, usize),
    /// Index of the generation claim the question was converted from.
    pub claim_ref: usize,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
}

/// The two nodes joined by a blank line. The boundary is only known here,
/// never shown to the verifier.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationContext {
    pub concatenated_text: String,
    /// Byte offset where the later node starts.
    pub boundary_offset: usize,
}

impl VerificationContext {
    pub fn new(prior: &str, current: &str) -> Self {
        let mut concatenated_text = String::with_capacity(prior.len() + current.len() + 2);
        concatenated_text.push_str(prior);
        concatenated_text.push_str(CONTEXT_SEPARATOR);
        let boundary_offset = concatenated_text.len();
        concatenated_text.push_str(current);
        VerificationContext {
            concatenated_text,
            boundary_offset,
        }
    }

    pub fn from_nodes(prior: &Node, current: &Node) -> Self {
        Self::new(&prior.text(), &current.text())
    }

    pub fn prior(&self) -> &str {
        let end = self.boundary_offset.saturating_sub(CONTEXT_SEPARATOR.len());
        &self.concatenated_text[..end]
    }

    pub fn current(&self) -> &str {
        &self.concatenated_text[self.boundary_offset..]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EdgeError {
    #[error("malformed {stage} response after reprompt: {detail}")]
    MalformedResponse { stage: &'static str, detail: String },
    #[error("invalid node pair ({0}, {1}): source must precede target")]
    InvalidPair(usize, usize),
    #[error("question cap must be at least 1")]
    InvalidCap,
    #[error("question is not pending")]
    NotPending,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Model routing and limits for edge construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeConfig {
    pub generation_model: String,
    pub verification_model: String,
    pub cap: usize,
    pub temperature: f64,
    pub max_output: u32,
}

impl Default for EdgeConfig {
    fn default() -> Self {
        EdgeConfig {
            generation_model: "gpt-4-1106-preview".into(),
            verification_model: "gpt-3.5-turbo-1106".into(),
            cap: DEFAULT_CAP,
            temperature: 0.0,
            max_output: 1024,
        }
    }
}

/// Output of the two generation turns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Generation {
    pub claims: Vec<ConnectionClaim>,
    pub questions: Vec<Question>,
}

/// Drives the generation and verification prompts through a chat backend.
#[derive(Debug, Clone)]
pub struct EdgeBuilder<B> {
    backend: B,
    config: EdgeConfig,
}

impl<B: ChatBackend> EdgeBuilder<B> {
    pub fn new(backend: B, config: EdgeConfig) -> Self {
        EdgeBuilder { backend, config }
    }

    pub fn config(&self) -> &EdgeConfig {
        &self.config
    }

    pub fn backend(&self) -> &B {
        &self.backend
    }

    fn request(&self, model: &str, messages: Vec<Message>) -> ChatRequest {
        ChatRequest {
            model_id: model.to_string(),
            messages,
            temperature: self.config.temperature,
            max_output: self.config.max_output,
        }
    }

    /// Send `messages`, parse the reply, and on a parse failure reprompt once
    /// with a format reminder in the same conversation. The assistant reply
    /// that parsed is appended to `messages`.
    fn ask<T>(
        &self,
        model: &str,
        messages: &mut Vec<Message>,
        stage: &'static str,
        parse: impl Fn(&str) -> Result<T, String>,
    ) -> Result<T, EdgeError> {
        let reply = self.backend.complete(&self.request(model, messages.clone()))?;
        match parse(&reply.content) {
            Ok(v) => {
                messages.push(Message::assistant(reply.content));
                Ok(v)
            }
            Err(first) => {
                log::debug!("{stage}: reprompting after parse failure: {first}");
                messages.push(Message::assistant(reply.content));
                messages.push(Message::user(prompts::FORMAT_REMINDER.render(&[])));
                let retry = self.backend.complete(&self.request(model, messages.clone()))?;
                let parsed = parse(&retry.content).map_err(|detail| EdgeError::MalformedResponse { stage, detail })?;
                messages.push(Message::assistant(retry.content));
                Ok(parsed)
            }
        }
    }

    /// Run both generation turns for the pair `(prior, current)`.
    pub fn generate_questions(&self, prior: &Node, current: &Node) -> Result<Generation, EdgeError> {
        if prior.id >= current.id {
            return Err(EdgeError::InvalidPair(prior.id, current.id));
        }
        let cap = self.config.cap;
        if cap == 0 {
            return Err(EdgeError::InvalidCap);
        }
        let cap_text = cap.to_string();
        let prior_text = prior.text();
        let current_text = current.text();
        let model = self.config.generation_model.clone();
        let mut messages = vec![
            Message::system(prompts::SYSTEM.render(&[])),
            Message::user(prompts::GENERATION_TURN1.render(&[
                ("prior", &prior_text),
                ("current", &current_text),
                ("cap", &cap_text),
            ])),
        ];
        let claims = self.ask(&model, &mut messages, "generation turn 1", parse_claims)?;
        if claims.is_empty() {
            return Ok(Generation {
                claims,
                questions: Vec::new(),
            });
        }
        messages.push(Message::user(prompts::GENERATION_TURN2.render(&[("cap", &cap_text)])));
        let items = self.ask(&model, &mut messages, "generation turn 2", parse_numbered_questions)?;
        let mut used = BTreeSet::new();
        let questions = items
            .into_iter()
            .enumerate()
            .filter(|(_, (_, text))| used.insert(text.clone()))
            .take(cap)
            .map(|(pos, (number, text))| {
                let claim_ref = match number {
                    Some(n) if n >= 1 && n <= claims.len() => n - 1,
                    _ => pos.min(claims.len() - 1),
                };
                Question {
                    text,
                    source_pair: (prior.id, current.id),
                    claim_ref,
                    verdict: Verdict::Pending,
                    answer: None,
                    evidence: Vec::new(),
                }
            })
            .collect();
        Ok(Generation { claims, questions })
    }

    /// Back-verify a pending question over the concatenated pair.
    pub fn verify_question(&self, question: &Question, ctx: &VerificationContext) -> Result<Question, EdgeError> {
        if question.verdict != Verdict::Pending {
            return Err(EdgeError::NotPending);
        }
        let model = self.config.verification_model.clone();
        let mut messages = vec![
            Message::system(prompts::SYSTEM.render(&[])),
            Message::user(
                prompts::VERIFICATION.render(&[("context", &ctx.concatenated_text), ("question", &question.text)]),
            ),
        ];
        let reply = self.ask(&model, &mut messages, "verification", parse_verification)?;
        let evidence: Vec<Evidence> = reply
            .evidence
            .into_iter()
            .map(|sentence| {
                let source = attribute_evidence(&sentence, ctx);
                Evidence { sentence, source }
            })
            .collect();
        let verdict = if !reply.answerable {
            Verdict::DiscardedUnanswerable
        } else if evidence.iter().any(|e| e.source == Attribution::Prior) {
            Verdict::Retained
        } else {
            Verdict::DiscardedWrongSource
        };
        Ok(Question {
            verdict,
            answer: reply.answer,
            evidence,
            ..question.clone()
        })
    }

    /// Generate and verify; the edge keeps retained questions and counts the
    /// rest.
    pub fn build_edge(&self, prior: &Node, current: &Node) -> Result<Edge, EdgeError> {
        Ok(self.build_edge_verbose(prior, current)?.0)
    }

    /// Like [`build_edge`](Self::build_edge) but also returns every verified
    /// question, discarded ones included.
    pub fn build_edge_verbose(&self, prior: &Node, current: &Node) -> Result<(Edge, Vec<Question>), EdgeError> {
        let generation = self.generate_questions(prior, current)?;
        let ctx = VerificationContext::from_nodes(prior, current);
        let mut edge = Edge::empty(prior.id, current.id);
        let mut all = Vec::with_capacity(generation.questions.len());
        for q in &generation.questions {
            let verified = self.verify_question(q, &ctx)?;
            if verified.verdict == Verdict::Retained {
                edge.questions.push(verified.clone());
            } else {
                edge.discarded_count += 1;
            }
            all.push(verified);
        }
        Ok((edge, all))
    }
}

/// Attribute an evidence sentence to the earlier half, the later half, or
/// neither.
///
/// Matching is done on case-folded, punctuation-stripped, whitespace-collapsed
/// text. Verbatim containment wins; a sentence found in both halves is
/// attributed to the later one. Otherwise the sentence is attributed to a half
/// when at least 80% of its character 4-grams occur in that half, again
/// preferring the later half when both qualify.
pub fn attribute_evidence(sentence: &str, ctx: &VerificationContext) -> Attribution {
    let needle = normalize_for_match(sentence);
    if needle.is_empty() {
        return Attribution::Unmatched;
    }
    let prior = normalize_for_match(ctx.prior());
    let current = normalize_for_match(ctx.current());
    let in_prior = prior.contains(&needle);
    let in_current = current.contains(&needle);
    if in_current {
        return Attribution::Current;
    }
    if in_prior {
        return Attribution::Prior;
    }
    let prior_overlap = ngram_overlap(&needle, &prior, EVIDENCE_NGRAM);
    let current_overlap = ngram_overlap(&needle, &current, EVIDENCE_NGRAM);
    if current_overlap >= EVIDENCE_OVERLAP_THRESHOLD {
        Attribution::Current
    } else if prior_overlap >= EVIDENCE_OVERLAP_THRESHOLD {
        Attribution::Prior
    } else {
        Attribution::Unmatched
    }
}

fn char_ngrams(s: &str, n: usize) -> BTreeSet<&str> {
    let bounds: Vec<usize> = s.char_indices().map(|(i, _)| i).chain([s.len()]).collect();
    if bounds.len() <= n {
        return BTreeSet::new();
    }
    (0..bounds.len() - n).map(|k| &s[bounds[k]..bounds[k + n]]).collect()
}

/// Fraction of the distinct n-grams of `needle` that also occur in `haystack`.
pub fn ngram_overlap(needle: &str, haystack: &str, n: usize) -> f64 {
    let grams = char_ngrams(needle, n);
    if grams.is_empty() {
        return 0.0;
    }
    let hay = char_ngrams(haystack, n);
    let shared = grams.iter().filter(|g| hay.contains(*g)).count();
    shared as f64 / grams.len() as f64
}

/// `(i, j)` pairs with `j - window <= i < j`, in `(i, j)` order.
pub fn pair_schedule(node_count: usize, window: usize) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for j in 0..node_count {
        for i in j.saturating_sub(window)..j {
            pairs.push((i, j));
        }
    }
    pairs.sort_unstable();
    pairs
}

// ---------------------------------------------------------------------------
// reply parsers

fn is_none_reply(reply: &str) -> bool {
    let t = reply
        .trim()
        .trim_matches(|c: char| c == '.' || c == '*' || c == '"' || c.is_whitespace());
    t.eq_ignore_ascii_case("none")
}

/// Split a numbered list into `(number, body)` items. Lines that do not start
/// a new item are appended to the current one.
fn numbered_items(reply: &str) -> Vec<(usize, String)> {
    let mut items: Vec<(usize, String)> = Vec::new();
    for line in reply.lines() {
        let trimmed = line.trim().trim_start_matches("**");
        let digits = trimmed.bytes().take_while(u8::is_ascii_digit).count();
        let rest = &trimmed[digits..];
        let is_item = digits > 0 && (rest.starts_with('.') || rest.starts_with(')'));
        if is_item {
            let number = trimmed[..digits].parse().unwrap_or(0);
            let body = rest[1..].trim().trim_start_matches("**").trim();
            items.push((number, body.to_string()));
        } else if let Some((_, body)) = items.last_mut() {
            if !trimmed.is_empty() {
                body.push('\n');
                body.push_str(trimmed);
            }
        }
    }
    items
}

fn strip_label<'a>(line: &'a str, label: &str) -> Option<&'a str> {
    let line = line.trim().trim_start_matches(['-', '*', ' ']);
    let head = line.get(..label.len())?;
    if head.eq_ignore_ascii_case(label) {
        let rest = line[label.len()..].trim_start_matches('*').trim_start();
        rest.strip_prefix(':').map(|r| r.trim_start_matches('*').trim())
    } else {
        None
    }
}

fn unquote(s: &str) -> String {
    s.trim()
        .trim_matches(|c: char| matches!(c, '"' | '“' | '”' | '\'' | '*' | '`'))
        .trim()
        .to_string()
}

/// Parse the first-turn connection list.
pub fn parse_claims(reply: &str) -> Result<Vec<ConnectionClaim>, String> {
    if is_none_reply(reply) {
        return Ok(Vec::new());
    }
    let items = numbered_items(reply);
    if items.is_empty() {
        return Err("no numbered connections and no NONE marker".into());
    }
    let mut claims = Vec::with_capacity(items.len());
    for (number, body) in items {
        let mut prior = String::new();
        let mut later = String::new();
        let mut why = String::new();
        let mut field: Option<&mut String> = None;
        for line in body.lines() {
            if let Some(v) = strip_label(line, "EARLIER") {
                prior = v.to_string();
                field = Some(&mut prior);
            } else if let Some(v) = strip_label(line, "LATER") {
                later = v.to_string();
                field = Some(&mut later);
            } else if let Some(v) = strip_label(line, "WHY") {
                why = v.to_string();
                field = Some(&mut why);
            } else if let Some(f) = field.as_deref_mut() {
                f.push(' ');
                f.push_str(line.trim());
            }
        }
        let prior = unquote(&prior);
        if prior.is_empty() {
            return Err(format!("connection {number} has no EARLIER part"));
        }
        claims.push(ConnectionClaim {
            prior_excerpt: prior,
            event_in_current: unquote(&later),
            explanation: why.trim().to_string(),
        });
    }
    Ok(claims)
}

/// Parse the second-turn question list into `(item number, question)`.
pub fn parse_numbered_questions(reply: &str) -> Result<Vec<(Option<usize>, String)>, String> {
    if is_none_reply(reply) {
        return Ok(Vec::new());
    }
    let items = numbered_items(reply);
    if items.is_empty() {
        return Err("no numbered questions".into());
    }
    let questions: Vec<(Option<usize>, String)> = items
        .into_iter()
        .map(|(n, body)| {
            let joined = crate::text::collapse_whitespace(&body);
            (Some(n), unquote(&joined))
        })
        .filter(|(_, q)| !q.is_empty())
        .collect();
    if questions.is_empty() {
        return Err("numbered items are empty".into());
    }
    Ok(questions)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VerificationReply {
    pub answerable: bool,
    pub answer: Option<String>,
    pub evidence: Vec<String>,
}

/// Parse an `ANSWERABLE / ANSWER / EVIDENCE` reply.
pub fn parse_verification(reply: &str) -> Result<VerificationReply, String> {
    let mut answerable = None;
    let mut answer = None;
    let mut evidence = Vec::new();
    let mut in_evidence = false;
    for line in reply.lines() {
        if let Some(v) = strip_label(line, "ANSWERABLE") {
            let v = v.trim_matches(|c: char| !c.is_alphanumeric()).to_ascii_lowercase();
            answerable = match v.as_str() {
                _ if v.starts_with("yes") || v == "true" => Some(true),
                _ if v.starts_with("no") || v == "false" => Some(false),
                _ => return Err(format!("unreadable ANSWERABLE value {v:?}")),
            };
            in_evidence = false;
        } else if let Some(v) = strip_label(line, "ANSWER") {
            let v = v.trim();
            answer = (!v.is_empty()).then(|| v.to_string());
            in_evidence = false;
        } else if let Some(v) = strip_label(line, "EVIDENCE") {
            in_evidence = true;
            let v = unquote(v);
            if !v.is_empty() && !v.eq_ignore_ascii_case("none") {
                evidence.push(v);
            }
        } else if in_evidence {
            let t = line.trim();
            let digits = t.bytes().take_while(u8::is_ascii_digit).count();
            let body = if let Some(rest) = t.strip_prefix(['-', '*', '•']) {
                rest
            } else if digits > 0 && t[digits..].starts_with(['.', ')']) {
                &t[digits + 1..]
            } else {
                t
            };
            let body = unquote(body);
            if !body.is_empty() && !body.eq_ignore_ascii_case("none") {
                evidence.push(body);
            }
        }
    }
    let answerable = answerable.ok_or_else(|| String::from("missing ANSWERABLE line"))?;
    Ok(VerificationReply {
        answerable,
        answer,
        evidence,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chat::ChatResponse;
    use core::cell::RefCell;
    use std::collections::VecDeque;

    /// Replies from a fixed queue and records every request.
    struct Scripted {
        replies: RefCell<VecDeque<&'static str>>,
        seen: RefCell<Vec<ChatRequest>>,
    }

    impl Scripted {
        fn new(replies: &[&'static str]) -> Self {
            Scripted {
                replies: RefCell::new(replies.iter().copied().collect()),
                seen: RefCell::new(Vec::new()),
            }
        }
    }

    impl ChatBackend for Scripted {
        fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
            self.seen.borrow_mut().push(request.clone());
            let reply = self.replies.borrow_mut().pop_front().expect("unexpected extra request");
            Ok(ChatResponse::complete(reply))
        }
    }

    fn node(id: usize, text: &str) -> Node {
        Node::from_passage(id, text, 240)
    }

    const PRIOR: &str = "Anna hid the key under the stone. Then she left for the city.";
    const CURRENT: &str = "Years later Tom lifted the stone and found a key. He was puzzled.";

    #[test]
    fn attribution_rules() {
        let ctx = VerificationContext::new(PRIOR, CURRENT);
        assert_eq!(ctx.prior(), PRIOR);
        assert_eq!(ctx.current(), CURRENT);
        assert_eq!(
            attribute_evidence("Anna hid the key under the stone.", &ctx),
            Attribution::Prior
        );
        assert_eq!(
            attribute_evidence("anna HID the key, under the stone", &ctx),
            Attribution::Prior
        );
        assert_eq!(attribute_evidence("He was puzzled.", &ctx), Attribution::Current);
        assert_eq!(attribute_evidence("the stone", &ctx), Attribution::Current);
        assert_eq!(
            attribute_evidence("A dragon burned the village.", &ctx),
            Attribution::Unmatched
        );
        assert_eq!(attribute_evidence("", &ctx), Attribution::Unmatched);
    }

    #[test]
    fn sentence_in_both_halves_goes_to_current() {
        let ctx = VerificationContext::new("The bell rang. Mia ran.", "The bell rang. Night fell.");
        assert_eq!(attribute_evidence("The bell rang.", &ctx), Attribution::Current);
    }

    #[test]
    fn pair_schedule_counts() {
        assert!(pair_schedule(1, 4).is_empty());
        assert_eq!(pair_schedule(5, 4).len(), 10);
        assert_eq!(pair_schedule(12, 4).len(), 38);
        assert_eq!(pair_schedule(3, 1), vec![(0, 1), (1, 2)]);
    }

    #[test]
    fn claims_parser() {
        let reply = "1. EARLIER: Anna hid the key.\n   LATER: Tom finds a key.\n   WHY: same key\n2. **EARLIER:** \"She left\"\n   LATER: nobody is home\n   continued\n   WHY: x";
        let claims = parse_claims(reply).unwrap();
        assert_eq!(claims.len(), 2);
        assert_eq!(claims[0].prior_excerpt, "Anna hid the key.");
        assert_eq!(claims[1].prior_excerpt, "She left");
        assert_eq!(claims[1].event_in_current, "nobody is home continued");
        assert!(parse_claims("NONE").unwrap().is_empty());
        assert!(parse_claims("None.").unwrap().is_empty());
        assert!(parse_claims("I think there are links").is_err());
        assert!(parse_claims("1. LATER: x").is_err());
    }

    #[test]
    fn verification_parser() {
        let r =
            parse_verification("ANSWERABLE: Yes\nANSWER: the key\nEVIDENCE:\n- \"Anna hid the key.\"\n2. She left.")
                .unwrap();
        assert!(r.answerable);
        assert_eq!(r.answer.as_deref(), Some("the key"));
        assert_eq!(r.evidence, vec!["Anna hid the key.", "She left."]);
        let r = parse_verification("ANSWERABLE: no\nANSWER:\nEVIDENCE:\n- none").unwrap();
        assert!(!r.answerable);
        assert!(r.evidence.is_empty());
        assert!(parse_verification("yes, here: x").is_err());
    }

    #[test]
    fn generation_conversation_and_cap() {
        let turn1 = "1. EARLIER: a\n2. EARLIER: b\n3. EARLIER: c\n4. EARLIER: d\n5. EARLIER: e\n6. EARLIER: f";
        let turn2 = "1. Q1?\n2. Q2?\n3. Q3?\n4. Q4?\n5. Q5?\n6. Q6?";
        let backend = Scripted::new(&[turn1, turn2]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        let g = builder.generate_questions(&node(0, PRIOR), &node(1, CURRENT)).unwrap();
        assert_eq!(g.claims.len(), 6);
        assert_eq!(g.questions.len(), 4);
        assert!(g.questions.iter().all(|q| q.verdict == Verdict::Pending));
        assert_eq!(g.questions[3].claim_ref, 3);
        let seen = backend.seen.borrow();
        assert_eq!(seen.len(), 2);
        // second turn continues the same conversation
        assert_eq!(seen[1].messages.len(), 4);
        assert_eq!(seen[1].messages[..2], seen[0].messages[..]);
        assert_eq!(seen[1].messages[2].content, turn1);
        assert_eq!(seen[0].model_id, "gpt-4-1106-preview");
        assert_eq!(seen[0].temperature, 0.0);
    }

    #[test]
    fn no_connections_means_no_second_turn() {
        let backend = Scripted::new(&["NONE"]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        let g = builder.generate_questions(&node(0, PRIOR), &node(1, CURRENT)).unwrap();
        assert!(g.questions.is_empty());
        assert_eq!(backend.seen.borrow().len(), 1);
    }

    #[test]
    fn one_reprompt_then_malformed() {
        let backend = Scripted::new(&["garbage", "1. EARLIER: fixed", "still garbage", "more garbage"]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        let err = builder
            .generate_questions(&node(0, PRIOR), &node(1, CURRENT))
            .unwrap_err();
        assert!(matches!(
            err,
            EdgeError::MalformedResponse {
                stage: "generation turn 2",
                ..
            }
        ));
        let seen = backend.seen.borrow();
        assert_eq!(seen.len(), 4);
        assert_eq!(
            seen[1].messages.last().unwrap().content,
            prompts::FORMAT_REMINDER.render(&[])
        );
    }

    #[test]
    fn pair_order_and_cap_are_checked() {
        let backend = Scripted::new(&[]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        assert_eq!(
            builder.generate_questions(&node(1, PRIOR), &node(1, CURRENT)),
            Err(EdgeError::InvalidPair(1, 1))
        );
        let builder = EdgeBuilder::new(
            &backend,
            EdgeConfig {
                cap: 0,
                ..EdgeConfig::default()
            },
        );
        assert_eq!(
            builder.generate_questions(&node(0, PRIOR), &node(1, CURRENT)),
            Err(EdgeError::InvalidCap)
        );
    }

    #[test]
    fn verification_verdicts() {
        let ctx = VerificationContext::new(PRIOR, CURRENT);
        let pending = Question {
            text: "Why was there a key under the stone?".into(),
            source_pair: (0, 1),
            claim_ref: 0,
            verdict: Verdict::Pending,
            answer: None,
            evidence: Vec::new(),
        };
        let backend = Scripted::new(&[
            "ANSWERABLE: yes\nANSWER: Anna hid it\nEVIDENCE:\n- Anna hid the key under the stone.",
            "ANSWERABLE: yes\nANSWER: ?\nEVIDENCE:\n- Years later Tom lifted the stone and found a key.",
            "ANSWERABLE: no\nANSWER:\nEVIDENCE:",
            "ANSWERABLE: yes\nANSWER: x\nEVIDENCE:",
        ]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        let verdicts: Vec<Verdict> = (0..4)
            .map(|_| builder.verify_question(&pending, &ctx).unwrap().verdict)
            .collect();
        assert_eq!(
            verdicts,
            vec![
                Verdict::Retained,
                Verdict::DiscardedWrongSource,
                Verdict::DiscardedUnanswerable,
                Verdict::DiscardedWrongSource
            ]
        );
        assert_eq!(backend.seen.borrow()[0].model_id, "gpt-3.5-turbo-1106");
        // the verifier never sees where the later node starts
        let prompt = &backend.seen.borrow()[0].messages[1].content;
        assert!(prompt.contains(&alloc::format!("{PRIOR}\n\n{CURRENT}")));

        let done = Question {
            verdict: Verdict::Retained,
            ..pending
        };
        assert_eq!(builder.verify_question(&done, &ctx), Err(EdgeError::NotPending));
    }

    #[test]
    fn build_edge_counts() {
        let backend = Scripted::new(&[
            "1. EARLIER: Anna hid the key\n   LATER: Tom finds it\n   WHY: same key\n2. EARLIER: She left\n   LATER: x\n   WHY: y",
            "1. Why was a key under the stone?\n2. Where was Anna?",
            "ANSWERABLE: yes\nANSWER: Anna hid it\nEVIDENCE:\n- Anna hid the key under the stone.",
            "ANSWERABLE: no\nANSWER:\nEVIDENCE:",
        ]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        let edge = builder.build_edge(&node(0, PRIOR), &node(1, CURRENT)).unwrap();
        assert_eq!(edge.questions.len(), 1);
        assert_eq!(edge.discarded_count, 1);
        assert_eq!(edge.generated_count(), 2);

        let backend = Scripted::new(&["NONE"]);
        let builder = EdgeBuilder::new(&backend, EdgeConfig::default());
        let edge = builder.build_edge(&node(0, PRIOR), &node(1, CURRENT)).unwrap();
        assert!(edge.is_empty());
        assert_eq!(edge.discarded_count, 0);
    }
}
