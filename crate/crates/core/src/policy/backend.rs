use serde::{Deserialize, Serialize};

use crate::model::Observation;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

/// Out-of-band metadata about a request. Remote backends ignore it; the
/// scripted backend matches on it.
#[derive(Debug, Clone, Default)]
pub struct RequestTags {
    pub query_id: Option<String>,
    /// The observation the request is about (the agent's current page).
    pub observation: Option<Observation>,
    /// Position of the request in a sequence (candidate slot, simulation depth).
    pub ordinal: u32,
    /// 0 for the first try, 1 for a re-prompt.
    pub attempt: u32,
}

impl RequestTags {
    pub fn for_query(query_id: &str) -> Self {
        RequestTags {
            query_id: Some(query_id.to_string()),
            ..Default::default()
        }
    }

    pub fn with_observation(mut self, observation: &Observation) -> Self {
        self.observation = Some(observation.clone());
        self
    }

    pub fn with_ordinal(mut self, ordinal: u32) -> Self {
        self.ordinal = ordinal;
        self
    }

    pub fn with_attempt(mut self, attempt: u32) -> Self {
        self.attempt = attempt;
        self
    }
}

#[derive(Debug, Clone)]
pub struct CompletionRequest {
    /// System prompt; omitted from the wire when empty.
    pub system: String,
    pub messages: Vec<ChatMessage>,
    pub tags: RequestTags,
}

impl CompletionRequest {
    pub fn new(system: impl Into<String>, messages: Vec<ChatMessage>, tags: RequestTags) -> Self {
        CompletionRequest {
            system: system.into(),
            messages,
            tags,
        }
    }

    /// System prompt and all message contents, newline-joined.
    pub fn prompt_text(&self) -> String {
        let mut out = self.system.clone();
        for m in &self.messages {
            out.push('\n');
            out.push_str(&m.content);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    /// Generated (completion) tokens.
    pub tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    #[error("backend unavailable: {reason}")]
    Unavailable { reason: String, retryable: bool },
    #[error("scripted backend has no entry for {key}")]
    ScriptMiss { key: String },
    #[error("completion request has no messages")]
    EmptyRequest,
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A text-completion model.
pub trait Backend: Send + Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError>;

    fn name(&self) -> &str {
        "backend"
    }
}

impl<B: Backend + ?Sized> Backend for std::sync::Arc<B> {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        (**self).complete(request)
    }

    fn name(&self) -> &str {
        (**self).name()
    }
}

/// Send one completion request.
pub fn complete(
    backend: &dyn Backend,
    system: &str,
    messages: Vec<ChatMessage>,
    tags: RequestTags,
) -> Result<Completion, BackendError> {
    if messages.is_empty() {
        return Err(BackendError::EmptyRequest);
    }
    backend.complete(&CompletionRequest::new(system, messages, tags))
}

/// Whitespace-token count, used when a backend reports no usage.
pub fn whitespace_tokens(text: &str) -> u64 {
    text.split_whitespace().count() as u64
}
