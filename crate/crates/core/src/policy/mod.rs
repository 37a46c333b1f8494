//! The acting policy: clipped context, completion backends, and
//! reply parsing into (thought, action).

mod backend;
mod context;
mod remote;
mod scripted;

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

pub use backend::{
    complete, whitespace_tokens, Backend, BackendError, ChatMessage, Completion,
    CompletionRequest, RequestTags, Role,
};
pub use context::{clip_context, ContextEntry, PromptContext};
pub use remote::{parse_response, RemoteBackend, RemoteSettings};
pub use scripted::{OneOrMany, ScriptEntry, ScriptMatch, ScriptedBackend};

use crate::model::{parse_agent_reply, Action, ProtocolError, Thought};
use crate::prompts;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("protocol violation after re-prompt: {0}")]
    ProtocolViolation(ProtocolError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    Scripted,
    Remote,
}

fn default_max_tokens() -> u32 {
    1000
}
fn default_seed() -> i64 {
    42
}
fn default_retries() -> u32 {
    3
}
fn default_in_flight() -> usize {
    4
}
fn default_timeout() -> u64 {
    120
}

/// How to reach one model. Sampling defaults are greedy with a fixed seed
/// and a 1000-token cap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model_name: Option<String>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default = "default_seed")]
    pub seed: i64,
    /// Script file for the scripted kind.
    #[serde(default)]
    pub script: Option<PathBuf>,
    /// Name of the environment variable that holds the API key.
    #[serde(default)]
    pub api_key_env: Option<String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendConfig {
    pub fn scripted(script: impl Into<PathBuf>) -> Self {
        BackendConfig {
            kind: BackendKind::Scripted,
            endpoint: None,
            model_name: None,
            max_tokens: default_max_tokens(),
            temperature: 0.0,
            seed: default_seed(),
            script: Some(script.into()),
            api_key_env: None,
            max_retries: default_retries(),
            max_in_flight: default_in_flight(),
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.max_tokens == 0 {
            return Err("max_tokens must be positive".into());
        }
        if !(self.temperature >= 0.0) {
            return Err("temperature must be non-negative".into());
        }
        match self.kind {
            BackendKind::Scripted if self.script.is_none() => {
                Err("scripted backend requires `script`".into())
            }
            BackendKind::Remote if self.endpoint.is_none() => {
                Err("remote backend requires `endpoint`".into())
            }
            BackendKind::Remote if self.model_name.is_none() => {
                Err("remote backend requires `model_name`".into())
            }
            _ => Ok(()),
        }
    }

    /// Instantiate the backend. Relative script paths resolve against `base_dir`.
    pub fn build(&self, name: &str, base_dir: &Path) -> Result<Arc<dyn Backend>, BackendError> {
        self.validate()
            .map_err(|e| BackendError::Config(format!("{name}: {e}")))?;
        match self.kind {
            BackendKind::Scripted => {
                let script = self.script.as_ref().expect("validated");
                let path = if script.is_absolute() {
                    script.clone()
                } else {
                    base_dir.join(script)
                };
                Ok(Arc::new(ScriptedBackend::load(name, &path)?))
            }
            BackendKind::Remote => {
                let api_key = match &self.api_key_env {
                    Some(var) => Some(std::env::var(var).map_err(|_| {
                        BackendError::Config(format!("{name}: environment variable {var} is not set"))
                    })?),
                    None => None,
                };
                let settings = RemoteSettings {
                    endpoint: self.endpoint.clone().expect("validated"),
                    model: self.model_name.clone().expect("validated"),
                    api_key,
                    max_tokens: self.max_tokens,
                    temperature: self.temperature,
                    seed: self.seed,
                    max_retries: self.max_retries,
                    retry_base: Duration::from_millis(500),
                    timeout: Duration::from_secs(self.timeout_secs),
                    max_in_flight: self.max_in_flight,
                };
                Ok(Arc::new(RemoteBackend::new(name, settings)?))
            }
        }
    }
}

/// A parsed agent decision with the tokens spent producing it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decision {
    pub thought: Thought,
    pub action: Action,
    pub tokens: u64,
}

/// Send `system` + `user`, parse the reply as (thought, action), and give
/// the model one re-prompt if the reply breaks the protocol. The re-prompt
/// is tagged with the next attempt number.
pub fn request_decision(
    backend: &dyn Backend,
    system: &str,
    user: String,
    tags: RequestTags,
) -> Result<Decision, PolicyError> {
    let first = complete(backend, system, vec![ChatMessage::user(user.clone())], tags.clone())?;
    match parse_agent_reply(&first.text) {
        Ok((thought, action)) => Ok(Decision {
            thought,
            action,
            tokens: first.tokens,
        }),
        Err(err) => {
            let messages = vec![
                ChatMessage::user(user),
                ChatMessage::assistant(first.text.clone()),
                ChatMessage::user(prompts::reprompt(&err.to_string())),
            ];
            let next = tags.attempt + 1;
            let second = complete(backend, system, messages, tags.with_attempt(next))?;
            let (thought, action) =
                parse_agent_reply(&second.text).map_err(PolicyError::ProtocolViolation)?;
            Ok(Decision {
                thought,
                action,
                tokens: first.tokens + second.tokens,
            })
        }
    }
}

/// One policy step: the agent's thought and action for `ctx`.
pub fn decide(
    backend: &dyn Backend,
    ctx: &PromptContext,
    query_id: &str,
) -> Result<Decision, PolicyError> {
    let tags = RequestTags::for_query(query_id).with_observation(&ctx.current);
    request_decision(backend, &ctx.system_instructions, ctx.render_user(), tags)
}
