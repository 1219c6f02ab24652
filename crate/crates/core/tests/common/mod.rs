#![allow(dead_code)]

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};

use sfr_core::agent::{AgentAction, Question, TaskKind, Gold, ToolArgs};
use sfr_core::policy::{serialize_action, PolicyProfile};
use sfr_core::toolbox::{
    Blocklist, FixtureFetcher, SearchResult, Sandbox, SandboxConfig, StubSearch, ToolExecutor, ToolFatal, ToolResult,
    Toolbox,
};

pub fn profile() -> PolicyProfile {
    PolicyProfile::single_turn()
}

pub fn tool(name: &str, args: Value) -> String {
    serialize_action(&profile(), &AgentAction::tool(name, args))
}

pub fn search(query: &str) -> String {
    tool("search_internet", json!({ "query": query }))
}

pub fn browse(url: &str, section: u64) -> String {
    tool("browse_page", json!({ "url": url, "section_id": section }))
}

pub fn clean(content: &str) -> String {
    serialize_action(&profile(), &AgentAction::CleanMemory { content: content.into() })
}

pub fn answer(text: &str) -> String {
    serialize_action(&profile(), &AgentAction::answer(text))
}

pub fn think(thought: &str, body: &str) -> String {
    format!("<think>{thought}</think>{body}")
}

pub fn short_q(id: &str, text: &str, gold: &str) -> Question {
    Question::new(id, text, TaskKind::ShortFormQa, Some(Gold::Answer(gold.into()))).unwrap()
}

pub fn args(v: Value) -> ToolArgs {
    v.as_object().cloned().unwrap_or_default()
}

/// Deterministic tools; the last word of a query sets the snippet length.
#[derive(Debug, Default)]
pub struct SizedTools {
    pub calls: AtomicUsize,
}

impl ToolExecutor for SizedTools {
    fn execute(&self, name: &str, args: &ToolArgs) -> Result<ToolResult, ToolFatal> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let query = args.get("query").and_then(Value::as_str).unwrap_or(name).to_string();
        let size = query.rsplit(' ').next().and_then(|w| w.parse().ok()).unwrap_or(40);
        Ok(ToolResult::Search {
            query: query.clone(),
            results: vec![SearchResult {
                url: "https://example.org/r".into(),
                title: Some(format!("result for {query}")),
                snippet: Some("z".repeat(size)),
                rank: 1,
            }],
        })
    }

    fn blocklist_active(&self) -> bool {
        true
    }
}

pub fn test_sandbox(timeout: Duration) -> Sandbox {
    Sandbox::new(SandboxConfig { timeout, ..Default::default() }).expect("python3 on PATH")
}

pub struct Fixture {
    pub search: Arc<StubSearch>,
    pub fetcher: Arc<FixtureFetcher>,
    pub toolbox: Toolbox,
}

/// A toolbox over stub search results and fixture pages, with
/// `leak.example` blocked.
pub fn fixture_toolbox() -> Fixture {
    let search = Arc::new(
        StubSearch::new()
            .with("capital of france", &[("https://wiki.example/paris", "Paris"), ("https://leak.example/answers", "Answers")])
            .with("rust", &[("https://rust.example/", "Rust")]),
    );
    let fetcher = Arc::new(
        FixtureFetcher::new()
            .with("https://wiki.example/paris", "<html><body><h1>Paris</h1><p>Paris is the capital of France.</p></body></html>")
            .with("https://leak.example/answers", "<p>the answer is Paris</p>"),
    );
    let toolbox = Toolbox::new(search.clone(), fetcher.clone(), test_sandbox(Duration::from_secs(5)))
        .with_blocklist(Blocklist::new(["leak.example"]));
    Fixture { search, fetcher, toolbox }
}
