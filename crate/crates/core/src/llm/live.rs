use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use super::{BackendError, ChatBackend, ChatRequest};
use crate::http::{HttpError, HttpTransport, UreqTransport};

pub const ENV_API_BASE: &str = "TASKPILOT_API_BASE";
pub const ENV_API_KEY: &str = "TASKPILOT_API_KEY";
pub const ENV_MODEL: &str = "TASKPILOT_MODEL";

#[derive(Debug, Clone, PartialEq)]
pub struct LiveConfig {
    /// Base URL of an OpenAI-compatible API, without the trailing path.
    pub api_base: String,
    pub api_key: Option<String>,
    pub model: String,
    pub timeout: Duration,
    /// Extra attempts after a transient failure.
    pub retries: u32,
    pub backoff: Duration,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            api_base: "https://api.openai.com/v1".into(),
            api_key: None,
            model: "gpt-4-1106-preview".into(),
            timeout: Duration::from_secs(120),
            retries: 2,
            backoff: Duration::from_millis(500),
        }
    }
}

impl LiveConfig {
    /// Defaults overridden by `TASKPILOT_API_BASE`, `TASKPILOT_API_KEY` and
    /// `TASKPILOT_MODEL`.
    pub fn from_env() -> Self {
        let mut cfg = Self::default();
        if let Ok(v) = std::env::var(ENV_API_BASE) {
            cfg.api_base = v.trim_end_matches('/').to_string();
        }
        cfg.api_key = std::env::var(ENV_API_KEY).ok().filter(|k| !k.is_empty());
        if let Ok(v) = std::env::var(ENV_MODEL) {
            cfg.model = v;
        }
        cfg
    }
}

/// Chat completions over HTTP (`POST {api_base}/chat/completions`).
pub struct LiveBackend {
    config: LiveConfig,
    transport: Arc<dyn HttpTransport>,
}

impl LiveBackend {
    pub fn new(config: LiveConfig) -> Self {
        Self::with_transport(config, Arc::new(UreqTransport))
    }

    pub fn with_transport(config: LiveConfig, transport: Arc<dyn HttpTransport>) -> Self {
        Self { config, transport }
    }

    fn body(&self, request: &ChatRequest) -> String {
        let model = if request.model_id.is_empty() { &self.config.model } else { &request.model_id };
        let messages: Vec<Value> =
            request.messages.iter().map(|m| json!({"role": m.role.as_str(), "content": m.content})).collect();
        json!({"model": model, "messages": messages, "temperature": request.temperature}).to_string()
    }
}

enum Attempt {
    Done(String),
    Transient { rate_limited: bool, message: String },
    Fatal(String),
}

impl LiveBackend {
    fn attempt(&self, url: &str, headers: &[(String, String)], body: &str) -> Attempt {
        match self.transport.post_json(url, headers, body, self.config.timeout) {
            Ok(resp) if resp.is_success() => match parse_completion(&resp.body) {
                Some(text) => Attempt::Done(text),
                None => Attempt::Fatal(format!("unexpected completion body: {}", truncate(&resp.body, 300))),
            },
            Ok(resp) if resp.status == 429 => {
                Attempt::Transient { rate_limited: true, message: truncate(&resp.body, 300) }
            }
            Ok(resp) if resp.status >= 500 => Attempt::Transient {
                rate_limited: false,
                message: format!("status {}: {}", resp.status, truncate(&resp.body, 300)),
            },
            Ok(resp) => Attempt::Fatal(format!("status {}: {}", resp.status, truncate(&resp.body, 300))),
            Err(e @ (HttpError::Timeout(_) | HttpError::Connection(_))) => {
                Attempt::Transient { rate_limited: false, message: e.to_string() }
            }
            Err(e) => Attempt::Fatal(e.to_string()),
        }
    }
}

impl ChatBackend for LiveBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        if request.messages.is_empty() {
            return Err(BackendError::InvalidRequest("request has no messages".into()));
        }
        let url = format!("{}/chat/completions", self.config.api_base);
        let mut headers = Vec::new();
        if let Some(key) = &self.config.api_key {
            headers.push(("Authorization".to_string(), format!("Bearer {key}")));
        }
        let body = self.body(request);
        let total = self.config.retries + 1;
        let mut last = None;
        for n in 0..total {
            if n > 0 {
                std::thread::sleep(self.config.backoff * 2u32.pow(n - 1));
            }
            match self.attempt(&url, &headers, &body) {
                Attempt::Done(text) => return Ok(text),
                Attempt::Fatal(msg) => return Err(BackendError::ProviderError(msg)),
                Attempt::Transient { rate_limited, message } => {
                    tracing::warn!(attempt = n + 1, %message, "transient model provider failure");
                    last = Some((rate_limited, message));
                }
            }
        }
        match last {
            Some((true, _)) => Err(BackendError::RateLimited(total)),
            Some((false, msg)) => Err(BackendError::ProviderError(msg)),
            None => Err(BackendError::ProviderError("no attempts made".into())),
        }
    }
}

fn parse_completion(body: &str) -> Option<String> {
    let v: Value = serde_json::from_str(body).ok()?;
    v.get("choices")?.get(0)?.get("message")?.get("content")?.as_str().map(str::to_string)
}

fn truncate(s: &str, max: usize) -> String {
    match s.char_indices().nth(max) {
        Some((i, _)) => format!("{}…", &s[..i]),
        None => s.to_string(),
    }
}
