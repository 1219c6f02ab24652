use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

pub const SERPER_KEY_ENV: &str = "SERPER_API_KEY";
const SERPER_URL: &str = "https://google.serper.dev/search";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchResult {
    pub url: String,
    #[serde(default)]
    pub title: Option<String>,
    #[serde(default)]
    pub snippet: Option<String>,
    /// 1-based position in the returned list.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SearchError {
    #[error("search provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("search provider configuration: {0}")]
    Config(String),
}

pub trait SearchProvider: Send + Sync {
    /// Up to ten organic results.
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchError>;
}

/// Maps a serper-style response body onto results. Entries without a link
/// are skipped.
pub fn parse_organic(body: &Value) -> Vec<SearchResult> {
    body.get("organic")
        .and_then(Value::as_array)
        .into_iter()
        .flatten()
        .filter_map(|hit| {
            let url = hit.get("link")?.as_str()?.to_string();
            let text = |k: &str| hit.get(k).and_then(Value::as_str).map(str::to_string);
            Some((url, text("title"), text("snippet")))
        })
        .take(10)
        .enumerate()
        .map(|(i, (url, title, snippet))| SearchResult { url, title, snippet, rank: i + 1 })
        .collect()
}

/// Live client for a serper-style search API.
#[derive(Debug, Clone)]
pub struct SerperClient {
    endpoint: String,
    api_key: String,
    http: reqwest::blocking::Client,
}

impl SerperClient {
    pub fn new(api_key: impl Into<String>) -> Self {
        Self::with_endpoint(SERPER_URL, api_key)
    }

    pub fn with_endpoint(endpoint: impl Into<String>, api_key: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: api_key.into(),
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .build()
                .expect("http client builds"),
        }
    }

    pub fn from_env() -> Result<Self, SearchError> {
        std::env::var(SERPER_KEY_ENV)
            .map(Self::new)
            .map_err(|_| SearchError::Config(format!("{SERPER_KEY_ENV} is not set")))
    }
}

impl SearchProvider for SerperClient {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchError> {
        let resp = self
            .http
            .post(&self.endpoint)
            .header("X-API-KEY", &self.api_key)
            .json(&json!({ "q": query, "num": 10 }))
            .send()
            .map_err(|e| SearchError::ProviderUnavailable(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(SearchError::ProviderUnavailable(format!("HTTP {}", resp.status())));
        }
        let body: Value = resp.json().map_err(|e| SearchError::ProviderUnavailable(e.to_string()))?;
        Ok(parse_organic(&body))
    }
}

/// Deterministic provider for tests: canned results per query, a call
/// counter and switchable failure.
#[derive(Debug, Default)]
pub struct StubSearch {
    responses: HashMap<String, Vec<SearchResult>>,
    calls: AtomicUsize,
    failing: AtomicBool,
}

impl StubSearch {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers results for `query`; ranks are assigned in order.
    pub fn with(mut self, query: &str, hits: &[(&str, &str)]) -> Self {
        let results = hits
            .iter()
            .enumerate()
            .map(|(i, (url, title))| SearchResult {
                url: url.to_string(),
                title: Some(title.to_string()),
                snippet: None,
                rank: i + 1,
            })
            .collect();
        self.responses.insert(query.to_string(), results);
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn set_failing(&self, failing: bool) {
        self.failing.store(failing, Ordering::SeqCst);
    }
}

impl SearchProvider for StubSearch {
    fn search(&self, query: &str) -> Result<Vec<SearchResult>, SearchError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.failing.load(Ordering::SeqCst) {
            return Err(SearchError::ProviderUnavailable("stub failure".into()));
        }
        Ok(self.responses.get(query).cloned().unwrap_or_default())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn organic_mapping_caps_at_ten_and_tolerates_gaps() {
        let hits: Vec<Value> = (0..12)
            .map(|i| if i == 1 { json!({"link": format!("https://x/{i}")}) } else { json!({"link": format!("https://x/{i}"), "title": "t", "snippet": "s"}) })
            .collect();
        let out = parse_organic(&json!({ "organic": hits }));
        assert_eq!(out.len(), 10);
        assert_eq!(out.iter().map(|r| r.rank).collect::<Vec<_>>(), (1..=10).collect::<Vec<_>>());
        assert_eq!(out[1].title, None);
        assert!(parse_organic(&json!({})).is_empty());
    }
}
