//! Narrative coherence graphs.
//!
//! A narrative is split into sentence-aligned chunks (nodes). Edges between a
//! preceding and a succeeding chunk hold retrospective questions: questions
//! raised by the later chunk whose answers are grounded in the earlier one.
//! Edges are produced by a two-stage chat protocol (question generation, then
//! back verification with evidence attribution) and consumed by recap ranking,
//! edge-fused retrieval, a trainable attention rerank head and QA context
//! assembly.
//!
//! This crate is `no_std` and only needs `alloc`. Everything that touches the
//! network or the filesystem goes through the [`chat::ChatBackend`] and
//! [`retrieval::EmbeddingProvider`] traits and lives in the companion `narco`
//! crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod chat;
pub mod chunking;
pub mod edge;
pub mod graph;
pub mod linalg;
pub mod prompts;
pub mod qa;
pub mod recap;
pub mod rerank;
pub mod retrieval;
pub mod text;

pub use chunking::{chunk_text, split_sentences, Node, Sentence};
pub use graph::{Edge, NarrativeGraph};
