//! Blocking client for OpenAI-style chat-completions endpoints.
//!
//! Requests are `POST {endpoint}` with a JSON body
//! `{model, temperature, messages:[{role, content}]}`; the reply text is read
//! from `choices[0].message.content`. The bearer token is taken from the
//! environment variable named in the config and never from the config itself.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LlmError {
    #[error("invalid client config: {0}")]
    Config(String),
    #[error("network error: {0}")]
    Network(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LlmClientConfig {
    pub endpoint: String,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: String,
    pub timeout_secs: f64,
    pub max_retries: u32,
    pub temperature: f64,
    pub model: String,
    /// Delay before the first retry; doubles on each further attempt.
    pub backoff_ms: u64,
}

impl Default for LlmClientConfig {
    fn default() -> Self {
        Self {
            endpoint: "http://127.0.0.1:8000/v1/chat/completions".into(),
            api_key_env: "LLM_API_KEY".into(),
            timeout_secs: 30.0,
            max_retries: 2,
            temperature: 0.2,
            model: "default".into(),
            backoff_ms: 250,
        }
    }
}

impl LlmClientConfig {
    pub fn validate(&self) -> Result<(), LlmError> {
        if !(self.timeout_secs.is_finite() && self.timeout_secs > 0.0) {
            return Err(LlmError::Config(format!("timeout must be positive, got {}", self.timeout_secs)));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LlmError::Config(format!("temperature must be >= 0, got {}", self.temperature)));
        }
        if self.endpoint.is_empty() {
            return Err(LlmError::Config("endpoint is empty".into()));
        }
        Ok(())
    }
}

pub struct ChatClient {
    cfg: LlmClientConfig,
    agent: ureq::Agent,
    token: Option<String>,
}

impl ChatClient {
    pub fn new(cfg: &LlmClientConfig) -> Result<Self, LlmError> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs_f64(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let token = std::env::var(&cfg.api_key_env).ok().filter(|t| !t.is_empty());
        if token.is_none() {
            log::debug!("{} is not set; sending requests without authorization", cfg.api_key_env);
        }
        Ok(Self {
            cfg: cfg.clone(),
            agent,
            token,
        })
    }

    pub fn config(&self) -> &LlmClientConfig {
        &self.cfg
    }

    /// Sends one system + user exchange and returns the assistant text.
    /// Transport failures, 429 and 5xx responses are retried.
    pub fn chat(&self, system: &str, user: &str) -> Result<String, LlmError> {
        let mut messages = Vec::new();
        if !system.is_empty() {
            messages.push(json!({"role": "system", "content": system}));
        }
        messages.push(json!({"role": "user", "content": user}));
        let body = json!({
            "model": self.cfg.model,
            "temperature": self.cfg.temperature,
            "messages": messages,
        });

        let mut last = LlmError::Network("no attempt made".into());
        for attempt in 0..=self.cfg.max_retries {
            if attempt > 0 {
                let delay = self.cfg.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                std::thread::sleep(Duration::from_millis(delay));
            }
            log::debug!("llm request attempt {attempt}: {body}");
            match self.send(&body) {
                Ok(text) => {
                    log::debug!("llm response: {text}");
                    return Ok(text);
                }
                Err(Attempt::Retry(e)) => {
                    log::warn!("llm request failed (attempt {}): {e}", attempt + 1);
                    last = e;
                }
                Err(Attempt::Fatal(e)) => return Err(e),
            }
        }
        Err(last)
    }

    fn send(&self, body: &Value) -> Result<String, Attempt> {
        let mut req = self.agent.post(&self.cfg.endpoint);
        if let Some(token) = &self.token {
            req = req.header("Authorization", format!("Bearer {token}"));
        }
        let mut resp = req
            .send_json(body)
            .map_err(|e| Attempt::Retry(LlmError::Network(e.to_string())))?;
        let status = resp.status().as_u16();
        let text = resp
            .body_mut()
            .read_to_string()
            .map_err(|e| Attempt::Retry(LlmError::Network(e.to_string())))?;
        match status {
            200..=299 => extract_content(&text).map_err(Attempt::Fatal),
            429 | 500..=599 => Err(Attempt::Retry(LlmError::Network(format!("HTTP {status}")))),
            _ => Err(Attempt::Fatal(LlmError::Network(format!("HTTP {status}: {}", truncate(&text, 200))))),
        }
    }
}

enum Attempt {
    Retry(LlmError),
    Fatal(LlmError),
}

fn truncate(s: &str, n: usize) -> &str {
    match s.char_indices().nth(n) {
        Some((i, _)) => &s[..i],
        None => s,
    }
}

/// Pulls `choices[0].message.content` out of a completions reply.
pub fn extract_content(body: &str) -> Result<String, LlmError> {
    let v: Value =
        serde_json::from_str(body).map_err(|e| LlmError::MalformedResponse(format!("not JSON: {e}")))?;
    v.pointer("/choices/0/message/content")
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| LlmError::MalformedResponse("missing choices[0].message.content".into()))
}

/// Numeric literals in `s`, in order: runs of digits with at most one
/// interior decimal point, e.g. `20.03`, `5`, `0.431`.
pub fn numeric_literals(s: &str) -> Vec<&str> {
    let b = s.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < b.len() {
        if b[i].is_ascii_digit() {
            let start = i;
            while i < b.len() && b[i].is_ascii_digit() {
                i += 1;
            }
            if i + 1 < b.len() && b[i] == b'.' && b[i + 1].is_ascii_digit() {
                i += 1;
                while i < b.len() && b[i].is_ascii_digit() {
                    i += 1;
                }
            }
            out.push(&s[start..i]);
        } else {
            i += 1;
        }
    }
    out
}
