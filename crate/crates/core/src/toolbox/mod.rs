//! The three-tool environment: web search, static page browsing and
//! stateless code execution, plus the contamination blocklist and the
//! persistent tool-result cache.

mod blocklist;
mod browse;
mod cache;
mod sandbox;
mod search;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::ToolArgs;
use crate::policy::{BROWSE_PAGE, CODE_INTERPRETER, SEARCH_INTERNET};
use crate::tokens::{default_counter, SharedCounter};

pub use blocklist::{Blocklist, BlocklistError};
pub use browse::{
    html_to_markdown, paginate, FetchError, FixtureFetcher, HttpFetcher, PageDocument, PageFetcher, Section,
    SectionContent, DEFAULT_SECTION_LIMIT,
};
pub use cache::{canonical_args, cache_key, ToolCache, CACHE_FILE};
pub use sandbox::{ExecOutcome, ExecutionResult, Sandbox, SandboxConfig, SandboxError, BLOCKED_MODULES};
pub use search::{SearchError, SearchProvider, SearchResult, SerperClient, StubSearch, SERPER_KEY_ENV};

/// Observation text for a blocked domain.
pub const UNAVAILABLE: &str = "Unavailable";
/// Observation text when the search provider fails.
pub const SEARCH_UNAVAILABLE: &str = "search temporarily unavailable";

/// Typed outcome of one tool invocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ToolResult {
    Search { query: String, results: Vec<SearchResult> },
    Section(SectionContent),
    Execution(ExecutionResult),
    Unavailable,
    Error { message: String },
    Notice { message: String },
}

impl ToolResult {
    pub fn error(message: impl Into<String>) -> Self {
        ToolResult::Error { message: message.into() }
    }

    /// The text the agent sees.
    pub fn observation(&self) -> String {
        match self {
            ToolResult::Search { query, results } if results.is_empty() => format!("No results for \"{query}\"."),
            ToolResult::Search { query, results } => {
                let mut s = format!("Search results for \"{query}\":");
                for r in results {
                    s.push_str(&format!("\n{}. {}\n   {}", r.rank, r.title.as_deref().unwrap_or("(untitled)"), r.url));
                    if let Some(snippet) = &r.snippet {
                        s.push_str(&format!("\n   {snippet}"));
                    }
                }
                s
            }
            ToolResult::Section(c) => format!(
                "[{} | section {} of sections 0..{}]\n{}",
                c.url,
                c.section_id,
                c.total_sections.saturating_sub(1),
                c.text
            ),
            ToolResult::Execution(e) => e.observation(),
            ToolResult::Unavailable => UNAVAILABLE.to_string(),
            ToolResult::Error { message } | ToolResult::Notice { message } => message.clone(),
        }
    }

    /// Results worth persisting: deterministic successes only.
    pub fn is_cacheable(&self) -> bool {
        match self {
            ToolResult::Search { .. } | ToolResult::Section(_) => true,
            ToolResult::Execution(e) => e.outcome != ExecOutcome::Timeout,
            _ => false,
        }
    }
}

/// A fault the agent cannot recover from, such as a missing interpreter.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("tool environment failure: {0}")]
pub struct ToolFatal(pub String);

/// Executes tool calls. Implementations must be safe to share across
/// episode workers.
pub trait ToolExecutor: Send + Sync {
    fn execute(&self, name: &str, args: &ToolArgs) -> Result<ToolResult, ToolFatal>;

    /// Whether a contamination blocklist guards search and browse.
    fn blocklist_active(&self) -> bool {
        false
    }
}

/// The production tool set.
pub struct Toolbox {
    search: Arc<dyn SearchProvider>,
    fetcher: Arc<dyn PageFetcher>,
    sandbox: Sandbox,
    blocklist: Blocklist,
    cache: Option<ToolCache>,
    section_limit: usize,
    counter: SharedCounter,
}

impl Toolbox {
    pub fn new(search: Arc<dyn SearchProvider>, fetcher: Arc<dyn PageFetcher>, sandbox: Sandbox) -> Self {
        Self {
            search,
            fetcher,
            sandbox,
            blocklist: Blocklist::default(),
            cache: None,
            section_limit: DEFAULT_SECTION_LIMIT,
            counter: default_counter(),
        }
    }

    pub fn with_blocklist(mut self, blocklist: Blocklist) -> Self {
        self.blocklist = blocklist;
        self
    }

    pub fn with_cache(mut self, cache: ToolCache) -> Self {
        self.cache = Some(cache);
        self
    }

    pub fn with_section_limit(mut self, limit: usize) -> Self {
        self.section_limit = limit.max(1);
        self
    }

    pub fn blocklist(&self) -> &Blocklist {
        &self.blocklist
    }

    pub fn cache(&self) -> Option<&ToolCache> {
        self.cache.as_ref()
    }

    /// Provider results with blocked domains removed and ranks renumbered.
    pub fn search_internet(&self, query: &str) -> ToolResult {
        let args = args_of([("query", Value::from(query))]);
        match self.cached(SEARCH_INTERNET, &args, || self.search_uncached(query)) {
            Ok(ToolResult::Search { query, results }) => {
                let results = results
                    .into_iter()
                    .filter(|r| !self.blocklist.is_blocked_url(&r.url))
                    .enumerate()
                    .map(|(i, r)| SearchResult { rank: i + 1, ..r })
                    .collect();
                ToolResult::Search { query, results }
            }
            Ok(other) => other,
            Err(e) => ToolResult::error(e.to_string()),
        }
    }

    fn search_uncached(&self, query: &str) -> Result<ToolResult, ToolFatal> {
        let query = query.trim();
        if query.is_empty() {
            return Ok(ToolResult::error("search_internet: query must not be empty"));
        }
        Ok(match self.search.search(query) {
            Ok(mut results) => {
                results.truncate(10);
                ToolResult::Search { query: query.to_string(), results }
            }
            Err(e) => {
                log::warn!("search provider failed: {e}");
                ToolResult::error(SEARCH_UNAVAILABLE)
            }
        })
    }

    pub fn browse_page(&self, url: &str, section_id: usize) -> ToolResult {
        if self.blocklist.is_blocked_url(url) {
            return ToolResult::Unavailable;
        }
        let args = args_of([("url", Value::from(url)), ("section_id", Value::from(section_id))]);
        self.cached(BROWSE_PAGE, &args, || Ok(self.browse_uncached(url, section_id)))
            .unwrap_or_else(|e| ToolResult::error(e.to_string()))
    }

    fn browse_uncached(&self, url: &str, section_id: usize) -> ToolResult {
        let html = match self.fetcher.fetch(url) {
            Ok(h) => h,
            Err(e) => return ToolResult::error(format!("browse_page: could not fetch {url}: {e}")),
        };
        let doc = PageDocument::build(url, &html, self.section_limit, self.counter.as_ref());
        match doc.section(section_id) {
            Some(c) => ToolResult::Section(c),
            None => ToolResult::error(format!(
                "browse_page: section_id {section_id} is out of range; valid sections 0..{}",
                doc.sections.len() - 1
            )),
        }
    }

    pub fn code_interpreter(&self, code: &str) -> Result<ToolResult, ToolFatal> {
        let args = args_of([("code", Value::from(code))]);
        self.cached(CODE_INTERPRETER, &args, || match self.sandbox.run(code) {
            Ok(r) => Ok(ToolResult::Execution(r)),
            Err(e) => Err(ToolFatal(e.to_string())),
        })
    }

    fn cached(
        &self,
        tool: &str,
        args: &ToolArgs,
        compute: impl FnOnce() -> Result<ToolResult, ToolFatal>,
    ) -> Result<ToolResult, ToolFatal> {
        match &self.cache {
            Some(cache) => cache.get_or_compute(tool, args, compute),
            None => compute(),
        }
    }
}

fn args_of<const N: usize>(pairs: [(&str, Value); N]) -> ToolArgs {
    pairs.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

impl ToolExecutor for Toolbox {
    fn execute(&self, name: &str, args: &ToolArgs) -> Result<ToolResult, ToolFatal> {
        let str_arg = |k: &str| args.get(k).and_then(Value::as_str);
        match name {
            SEARCH_INTERNET => Ok(self.search_internet(str_arg("query").unwrap_or_default())),
            BROWSE_PAGE => match (str_arg("url"), args.get("section_id").and_then(Value::as_u64)) {
                (Some(url), Some(id)) => Ok(self.browse_page(url, id as usize)),
                _ => Ok(ToolResult::error("browse_page needs url: str and section_id: int")),
            },
            CODE_INTERPRETER => self.code_interpreter(str_arg("code").unwrap_or_default()),
            other => Ok(ToolResult::error(format!("unknown tool `{other}`"))),
        }
    }

    fn blocklist_active(&self) -> bool {
        !self.blocklist.is_empty()
    }
}
