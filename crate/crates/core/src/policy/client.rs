use std::thread;
use std::time::Duration;

use serde_json::{json, Value};

use super::{Completion, Policy, PolicyError, PolicyProfile, ToolGrammar, Usage};
use crate::agent::{ChatMessage, Prompt, Role};

pub const API_BASE_ENV: &str = "SFR_API_BASE";
pub const API_KEY_ENV: &str = "SFR_API_KEY";

/// Bounded exponential backoff for transient endpoint failures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    /// Total requests per completion, the first one included.
    pub attempts: usize,
    pub initial_backoff: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { attempts: 3, initial_backoff: Duration::from_secs(1) }
    }
}

/// Client for an OpenAI-style `/chat/completions` endpoint. Cheap to clone
/// and safe to share across workers.
#[derive(Debug, Clone)]
pub struct ChatClient {
    base_url: String,
    api_key: Option<String>,
    model: String,
    profile: PolicyProfile,
    retry: RetryPolicy,
    http: reqwest::blocking::Client,
}

impl ChatClient {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>, profile: PolicyProfile) -> Self {
        Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key: None,
            model: model.into(),
            profile,
            retry: RetryPolicy::default(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(600))
                .build()
                .expect("http client builds"),
        }
    }

    /// Reads the base URL and key from the environment.
    pub fn from_env(model: impl Into<String>, profile: PolicyProfile) -> Result<Self, PolicyError> {
        let base = std::env::var(API_BASE_ENV).map_err(|_| PolicyError::Config(format!("{API_BASE_ENV} is not set")))?;
        let mut client = Self::new(base, model, profile);
        client.api_key = std::env::var(API_KEY_ENV).ok();
        Ok(client)
    }

    pub fn with_api_key(mut self, key: impl Into<String>) -> Self {
        self.api_key = Some(key.into());
        self
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn profile(&self) -> &PolicyProfile {
        &self.profile
    }

    fn body(&self, messages: &[ChatMessage]) -> Value {
        let messages: Vec<Value> = messages
            .iter()
            .map(|m| {
                let role = match m.role {
                    Role::System => "system",
                    Role::User => "user",
                    Role::Assistant => "assistant",
                    Role::Tool => "tool",
                };
                json!({ "role": role, "content": m.content })
            })
            .collect();
        json!({
            "model": self.model,
            "messages": messages,
            "max_tokens": self.profile.generation.max_tokens,
            "temperature": self.profile.generation.temperature,
        })
    }

    fn send_once(&self, body: &Value) -> Result<Value, Attempt> {
        let mut req = self.http.post(format!("{}/chat/completions", self.base_url)).json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| Attempt::Transient(e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| Attempt::Transient(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_str(&text).map_err(|e| Attempt::Fatal(PolicyError::BadResponse(e.to_string())));
        }
        let lower = text.to_lowercase();
        if (status.as_u16() == 400 || status.as_u16() == 413) && lower.contains("context") {
            return Err(Attempt::Fatal(PolicyError::ContextLengthExceeded(text)));
        }
        if status.is_server_error() || status.as_u16() == 429 {
            return Err(Attempt::Transient(format!("HTTP {status}")));
        }
        Err(Attempt::Fatal(PolicyError::BadResponse(format!("HTTP {status}: {text}"))))
    }

    /// Sends `messages` and returns the reply with tool calls rendered in
    /// the profile's grammar.
    pub fn chat(&self, messages: &[ChatMessage]) -> Result<Completion, PolicyError> {
        let body = self.body(messages);
        let mut backoff = self.retry.initial_backoff;
        let mut last = String::from("no attempt made");
        for attempt in 0..self.retry.attempts.max(1) {
            if attempt > 0 {
                thread::sleep(backoff);
                backoff *= 2;
            }
            match self.send_once(&body) {
                Ok(v) => return self.decode(&v),
                Err(Attempt::Fatal(e)) => return Err(e),
                Err(Attempt::Transient(e)) => {
                    log::warn!("chat endpoint attempt {} failed: {e}", attempt + 1);
                    last = e;
                }
            }
        }
        Err(PolicyError::EndpointUnavailable(last))
    }

    fn decode(&self, v: &Value) -> Result<Completion, PolicyError> {
        let choice = v
            .pointer("/choices/0")
            .ok_or_else(|| PolicyError::BadResponse("response has no choices".into()))?;
        let mut text = choice.pointer("/message/content").and_then(Value::as_str).unwrap_or_default().to_string();
        if let Some(call) = choice.pointer("/message/tool_calls/0/function") {
            let name = call.get("name").and_then(Value::as_str).unwrap_or_default();
            let args = match call.get("arguments") {
                Some(Value::String(s)) => serde_json::from_str(s).unwrap_or(Value::String(s.clone())),
                Some(other) => other.clone(),
                None => json!({}),
            };
            let call = json!({ "name": name, "arguments": args });
            let rendered = match self.profile.tool_grammar {
                ToolGrammar::NativeFunctionCall => json!({ "tool_call": call }).to_string(),
                ToolGrammar::TaggedToolCall => format!("{}{call}{}", super::grammar::TOOL_OPEN, super::grammar::TOOL_CLOSE),
            };
            text.push_str(&rendered);
        }
        let logprob = choice
            .pointer("/logprobs/content")
            .and_then(Value::as_array)
            .map(|toks| toks.iter().filter_map(|t| t.get("logprob").and_then(Value::as_f64)).sum());
        let count = |key: &str| v.pointer(&format!("/usage/{key}")).and_then(Value::as_u64).unwrap_or(0) as usize;
        Ok(Completion {
            text,
            logprob,
            usage: Usage { prompt_tokens: count("prompt_tokens"), completion_tokens: count("completion_tokens") },
        })
    }
}

enum Attempt {
    Transient(String),
    Fatal(PolicyError),
}

impl Policy for ChatClient {
    fn complete(&mut self, prompt: &Prompt) -> Result<Completion, PolicyError> {
        self.chat(&prompt.messages)
    }
}
