use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde_json::{json, Value};

use super::backend::{whitespace_tokens, Backend, BackendError, Completion, CompletionRequest};

#[derive(Debug, Clone)]
pub struct RemoteSettings {
    /// Full URL of the chat-completions endpoint.
    pub endpoint: String,
    pub model: String,
    pub api_key: Option<String>,
    pub max_tokens: u32,
    pub temperature: f64,
    pub seed: i64,
    pub max_retries: u32,
    pub retry_base: Duration,
    pub timeout: Duration,
    pub max_in_flight: usize,
}

/// Counting semaphore bounding concurrent requests.
#[derive(Debug)]
struct Gate {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Gate {
    fn new(permits: usize) -> Self {
        Gate {
            free: Mutex::new(permits.max(1)),
            cv: Condvar::new(),
        }
    }

    fn enter(&self) -> GateGuard<'_> {
        let mut free = self.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut free = self.0.free.lock().unwrap_or_else(|e| e.into_inner());
        *free += 1;
        self.0.cv.notify_one();
    }
}

/// Chat-completion client speaking the common `messages` / `choices` /
/// `usage` JSON schema over HTTP.
pub struct RemoteBackend {
    name: String,
    settings: RemoteSettings,
    client: reqwest::blocking::Client,
    gate: Gate,
}

impl RemoteBackend {
    pub fn new(name: impl Into<String>, settings: RemoteSettings) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(settings.timeout)
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let gate = Gate::new(settings.max_in_flight);
        Ok(RemoteBackend {
            name: name.into(),
            settings,
            client,
            gate,
        })
    }

    pub fn settings(&self) -> &RemoteSettings {
        &self.settings
    }

    pub fn request_body(&self, request: &CompletionRequest) -> Value {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        if !request.system.is_empty() {
            messages.push(json!({"role": "system", "content": request.system}));
        }
        for m in &request.messages {
            messages.push(json!({"role": m.role, "content": m.content}));
        }
        json!({
            "model": self.settings.model,
            "messages": messages,
            "max_tokens": self.settings.max_tokens,
            "temperature": self.settings.temperature,
            "seed": self.settings.seed,
        })
    }

    fn send_once(&self, body: &Value) -> Result<Completion, BackendError> {
        let mut req = self.client.post(&self.settings.endpoint).json(body);
        if let Some(key) = &self.settings.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| BackendError::Unavailable {
            reason: format!("{}: {e}", self.settings.endpoint),
            retryable: true,
        })?;
        let status = resp.status();
        let text = resp.text().map_err(|e| BackendError::Unavailable {
            reason: format!("reading response: {e}"),
            retryable: true,
        })?;
        if !status.is_success() {
            let retryable = status.as_u16() == 429 || status.is_server_error();
            return Err(BackendError::Unavailable {
                reason: format!("HTTP {status}: {}", text.chars().take(200).collect::<String>()),
                retryable,
            });
        }
        parse_response(&text)
    }
}

/// Extract `choices[0].message.content` and `usage.completion_tokens`.
pub fn parse_response(text: &str) -> Result<Completion, BackendError> {
    let bad = |why: &str| BackendError::Unavailable {
        reason: format!("unexpected response ({why})"),
        retryable: false,
    };
    let v: Value = serde_json::from_str(text).map_err(|_| bad("not JSON"))?;
    let content = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| bad("missing choices[0].message.content"))?
        .to_string();
    let tokens = v["usage"]["completion_tokens"]
        .as_u64()
        .unwrap_or_else(|| whitespace_tokens(&content));
    Ok(Completion {
        text: content,
        tokens,
    })
}

impl Backend for RemoteBackend {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, BackendError> {
        if request.messages.is_empty() {
            return Err(BackendError::EmptyRequest);
        }
        let body = self.request_body(request);
        let _permit = self.gate.enter();
        let mut attempt = 0;
        loop {
            match self.send_once(&body) {
                Ok(c) => return Ok(c),
                Err(BackendError::Unavailable { reason, retryable: true })
                    if attempt < self.settings.max_retries =>
                {
                    let delay = self.settings.retry_base * 2u32.saturating_pow(attempt);
                    log::warn!("{}: {reason}; retrying in {delay:?}", self.name);
                    std::thread::sleep(delay);
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn name(&self) -> &str {
        &self.name
    }
}
