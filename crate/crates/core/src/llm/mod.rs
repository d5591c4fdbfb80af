//! Chat-completion abstraction.
//!
//! Everything that talks to a language model goes through [`ChatBackend`].
//! Three implementations ship here: [`LiveBackend`] (OpenAI-compatible HTTP),
//! [`ReplayBackend`] (answers from a recorded transcript, never touches the
//! network) and [`RecordingBackend`] (wraps another backend and appends
//! every exchange to a transcript). [`ScriptedBackend`] is a programmable
//! stand-in used to author transcripts and drive tests.

mod extract;
mod live;
mod scripted;
mod transcript;

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use extract::{
    extract_code_block, extract_json, extract_tagged, fenced_blocks, wrap_tagged, ExtractError, FencedBlock,
};
pub use live::{LiveBackend, LiveConfig};
pub use scripted::{ScriptRule, ScriptedBackend};
pub use transcript::{RecordingBackend, ReplayBackend, Transcript, TranscriptEntry, TranscriptError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::System => "system",
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

/// Why a request is being made. Drives the default temperature and shows
/// up in transcripts so recordings are easy to audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Purpose {
    Plan,
    GenerateTool,
    Invoke,
    Critique,
    Refine,
    Qa,
    Curriculum,
}

impl Purpose {
    pub fn default_temperature(self) -> f32 {
        match self {
            Purpose::Plan | Purpose::Critique | Purpose::Invoke | Purpose::Qa => 0.0,
            Purpose::GenerateTool | Purpose::Refine => 0.2,
            Purpose::Curriculum => 0.7,
        }
    }
}

impl fmt::Display for Purpose {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<Message>,
    pub temperature: f32,
    pub model_id: String,
    pub purpose: Purpose,
}

impl ChatRequest {
    /// Single user-message request at the purpose's default temperature.
    pub fn user(purpose: Purpose, content: impl Into<String>) -> Self {
        Self {
            messages: vec![Message { role: Role::User, content: content.into() }],
            temperature: purpose.default_temperature(),
            model_id: String::new(),
            purpose,
        }
    }

    /// Appends a follow-up turn: the model's previous reply, then `feedback`.
    pub fn with_feedback(mut self, previous_reply: &str, feedback: impl Into<String>) -> Self {
        self.messages.push(Message { role: Role::Assistant, content: previous_reply.to_string() });
        self.messages.push(Message { role: Role::User, content: feedback.into() });
        self
    }

    /// Content of the last user message.
    pub fn last_user(&self) -> &str {
        self.messages.iter().rev().find(|m| m.role == Role::User).map_or("", |m| m.content.as_str())
    }
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("no recorded response for {purpose} request {key}")]
    ReplayMiss { key: String, purpose: Purpose },
    #[error("model provider error: {0}")]
    ProviderError(String),
    #[error("rate limited by provider after {0} attempts")]
    RateLimited(u32),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

pub trait ChatBackend: Send + Sync {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError>;
}

impl<B: ChatBackend + ?Sized> ChatBackend for std::sync::Arc<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

impl<B: ChatBackend + ?Sized> ChatBackend for &B {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        (**self).complete(request)
    }
}

/// Derives transcript keys from requests.
///
/// The key covers message roles and contents only, with whitespace runs
/// collapsed, so model id and temperature changes do not invalidate a
/// recording. Machine-specific literals (the sandbox path) are replaced by
/// stable tokens before hashing and before a request is written out.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RequestKeyer {
    redactions: Vec<(String, String)>,
}

impl RequestKeyer {
    pub fn new() -> Self {
        Self::default()
    }

    /// Replace `literal` with `token` wherever it occurs. Longer literals are
    /// applied first so nested paths redact cleanly.
    pub fn redact(mut self, literal: impl Into<String>, token: impl Into<String>) -> Self {
        let literal = literal.into();
        if !literal.is_empty() {
            self.redactions.push((literal, token.into()));
            self.redactions.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
        }
        self
    }

    pub fn apply(&self, text: &str) -> String {
        let mut out = text.to_string();
        for (literal, token) in &self.redactions {
            if out.contains(literal.as_str()) {
                out = out.replace(literal.as_str(), token);
            }
        }
        out
    }

    /// Inverse of [`apply`](Self::apply), used to hand recorded responses
    /// back with the current machine's literals.
    pub fn restore(&self, text: &str) -> String {
        let mut out = text.to_string();
        for (literal, token) in &self.redactions {
            if out.contains(token.as_str()) {
                out = out.replace(token.as_str(), literal);
            }
        }
        out
    }

    pub fn redacted_request(&self, request: &ChatRequest) -> ChatRequest {
        let mut out = request.clone();
        for m in &mut out.messages {
            m.content = self.apply(&m.content);
        }
        out
    }

    pub fn normalized(&self, request: &ChatRequest) -> String {
        request
            .messages
            .iter()
            .map(|m| format!("{}:{}", m.role.as_str(), collapse_whitespace(&self.apply(&m.content))))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Hex SHA-256 of the normalized request.
    pub fn key(&self, request: &ChatRequest) -> String {
        hex::encode(Sha256::digest(self.normalized(request).as_bytes()))
    }
}

fn collapse_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}
