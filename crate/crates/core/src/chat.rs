//! Chat-completion request/response types and the backend trait every
//! prompting stage talks through.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    pub fn system(content: impl Into<String>) -> Self {
        Message {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Message {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Message {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<Message>,
    pub temperature: f64,
    pub max_output: u32,
}

impl ChatRequest {
    /// Temperature 0 and a 1024-token output cap.
    pub fn new(model_id: impl Into<String>, messages: Vec<Message>) -> Self {
        ChatRequest {
            model_id: model_id.into(),
            messages,
            temperature: 0.0,
            max_output: 1024,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let Some(first) = self.messages.first() else {
            return Err(GatewayError::InvalidRequest("messages must not be empty".into()));
        };
        if first.role == Role::Assistant {
            return Err(GatewayError::InvalidRequest(
                "first message must be a system or user message".into(),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(
                "temperature must be finite and >= 0".into(),
            ));
        }
        if self.max_output == 0 {
            return Err(GatewayError::InvalidRequest("max_output must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Complete,
    Truncated,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    #[serde(default)]
    pub provider_meta: BTreeMap<String, String>,
}

impl ChatResponse {
    pub fn complete(content: impl Into<String>) -> Self {
        ChatResponse {
            content: content.into(),
            finish_reason: FinishReason::Complete,
            provider_meta: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum GatewayError {
    #[error("no replay fixture for request digest {digest}")]
    MissingFixture { digest: String },
    #[error("provider error: {0}")]
    Provider(String),
    #[error("provider call timed out")]
    Timeout,
    #[error("invalid chat request: {0}")]
    InvalidRequest(String),
    #[error("credential unavailable: {0}")]
    Credential(String),
    #[error("fixture store: {0}")]
    Store(String),
}

impl GatewayError {
    pub fn provider(msg: impl ToString) -> Self {
        GatewayError::Provider(msg.to_string())
    }
}

/// Anything that can answer a chat request: a live provider, a replay cache,
/// or a scripted stub in tests.
pub trait ChatBackend {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError>;
}

impl<T: ChatBackend + ?Sized> ChatBackend for &T {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for alloc::sync::Arc<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}

impl<T: ChatBackend + ?Sized> ChatBackend for alloc::boxed::Box<T> {
    fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        (**self).complete(request)
    }
}
