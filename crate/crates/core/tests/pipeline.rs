//! End-to-end over the core API with a scripted chat backend.

use std::cell::Cell;
use std::collections::BTreeSet;

use narco_core::chat::{ChatBackend, ChatRequest, ChatResponse, GatewayError, Role};
use narco_core::chunking::chunk_text;
use narco_core::edge::{pair_schedule, EdgeBuilder, EdgeConfig, EdgeError, Verdict};
use narco_core::graph::{node_degrees, NarrativeGraph};
use narco_core::qa::{assemble_context, ContextBudget, MCQuestion, McOption};
use narco_core::retrieval::{retrieve, FusionConfig, MockEmbedder};

const STORY: &str = "Mara hid the silver bell under the mill floor. The miller never noticed.\n\n\
The river rose in the spring and flooded the lower fields. Nobody went near the mill.\n\n\
When the water fell, Mara dug up the silver bell. She rang it at the crossroads.";

fn fenced(prompt: &str) -> Vec<&str> {
    prompt.split("\"\"\"").skip(1).step_by(2).map(str::trim).collect()
}

fn first_sentence(text: &str) -> &str {
    let end = text.find(". ").map_or(text.len(), |i| i + 1);
    &text[..end]
}

/// Links every pair through its first sentences; questions are answered from
/// the earlier passage only when that passage mentions the bell.
struct Scripted;

impl ChatBackend for Scripted {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        // skip format reminders appended by a reprompt
        let known = ["Below are two passages", "Now turn each connection", "Read the context"];
        let last = &request
            .messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User && known.iter().any(|k| m.content.starts_with(k)))
            .unwrap()
            .content;
        let reply = if last.starts_with("Below are two passages") {
            let f = fenced(last);
            format!(
                "1. EARLIER: {}\n   LATER: {}\n   WHY: They are linked.",
                first_sentence(f[0]),
                first_sentence(f[1])
            )
        } else if last.starts_with("Now turn each connection") {
            "1. What happened to the silver bell before this?".to_string()
        } else {
            let context = fenced(last)[0];
            let (prior, _) = context.split_once("\n\n").unwrap();
            if prior.contains("bell") {
                format!(
                    "ANSWERABLE: yes\nANSWER: It was hidden.\nEVIDENCE:\n- {}",
                    first_sentence(prior)
                )
            } else {
                "ANSWERABLE: no\nANSWER:\nEVIDENCE:\n- none".to_string()
            }
        };
        Ok(ChatResponse::complete(reply))
    }
}

fn build() -> NarrativeGraph {
    let nodes = chunk_text(STORY, 240);
    let builder = EdgeBuilder::new(Scripted, EdgeConfig::default());
    let mut graph = NarrativeGraph::new(nodes.clone());
    for (i, j) in pair_schedule(nodes.len(), 4) {
        graph.edges.push(builder.build_edge(&nodes[i], &nodes[j]).unwrap());
    }
    graph.canonicalize();
    graph
}

#[test]
fn graph_from_scripted_backend() {
    let graph = build();
    assert_eq!(graph.nodes.len(), 3);
    assert_eq!(graph.edges.len(), 3);
    let stats = graph.stats();
    // pairs starting at node 0 mention the bell, the (1, 2) pair does not
    assert_eq!(stats.generated_questions, 3);
    assert_eq!(stats.retained_questions, 2);
    assert_eq!(node_degrees(&graph).iter().sum::<usize>(), 4);
    assert!(graph
        .edges
        .iter()
        .flat_map(|e| &e.questions)
        .all(|q| q.verdict == Verdict::Retained));
    assert_eq!(NarrativeGraph::from_jsonl(&graph.to_jsonl()).unwrap(), graph);
}

#[test]
fn retrieval_and_context_over_built_graph() {
    let graph = build();
    let provider = MockEmbedder::new(32, 1);
    let ranked = retrieve("silver bell", &graph, &provider, &FusionConfig::default(), 2).unwrap();
    assert_eq!(ranked.len(), 2);
    let question = MCQuestion {
        stem: "Where did Mara ring the bell?".into(),
        options: ["At the crossroads", "In the mill"]
            .iter()
            .zip(["A", "B"])
            .map(|(t, l)| McOption {
                label: l.into(),
                text: (*t).into(),
            })
            .collect(),
        gold: Some("A".into()),
    };
    let ctx = assemble_context(
        &question,
        &graph,
        &provider,
        &FusionConfig::default(),
        ContextBudget::new(40).unwrap(),
        false,
    )
    .unwrap();
    assert!(ctx.word_count() <= 40);
    assert!(ctx.nodes.windows(2).all(|w| w[0] < w[1]));
}

/// Replies with garbage a fixed number of times before behaving.
struct Flaky {
    bad: Cell<usize>,
}

impl ChatBackend for Flaky {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        if self.bad.get() > 0 {
            self.bad.set(self.bad.get() - 1);
            return Ok(ChatResponse::complete("I am not sure what you mean."));
        }
        Scripted.complete(request)
    }
}

#[test]
fn one_reprompt_then_malformed() {
    let nodes = chunk_text(STORY, 240);
    let recovered = EdgeBuilder::new(Flaky { bad: Cell::new(1) }, EdgeConfig::default());
    assert_eq!(recovered.build_edge(&nodes[0], &nodes[2]).unwrap().questions.len(), 1);
    let failing = EdgeBuilder::new(Flaky { bad: Cell::new(2) }, EdgeConfig::default());
    assert!(matches!(
        failing.build_edge(&nodes[0], &nodes[2]),
        Err(EdgeError::MalformedResponse { .. })
    ));
    let ids: BTreeSet<usize> = nodes.iter().map(|n| n.id).collect();
    assert_eq!(ids, BTreeSet::from([0, 1, 2]));
}
