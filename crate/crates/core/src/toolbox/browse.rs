use std::collections::HashMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::LazyLock;
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use regex::{Captures, Regex};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokens::TokenCounter;

/// Default section size in proxy tokens.
pub const DEFAULT_SECTION_LIMIT: usize = 2000;

const DROPPED_ELEMENTS: &[&str] = &["script", "style", "noscript", "template", "svg", "head", "iframe", "object"];

const BLOCK_ELEMENTS: &[&str] = &[
    "address", "article", "aside", "blockquote", "body", "caption", "dd", "div", "dl", "dt", "fieldset",
    "figcaption", "figure", "footer", "form", "header", "html", "main", "nav", "ol", "p", "pre", "section",
    "table", "tbody", "tfoot", "thead", "tr", "ul",
];

fn re(pattern: &str) -> Regex {
    Regex::new(pattern).expect("static regex compiles")
}

static DROP_CLOSED: LazyLock<Vec<Regex>> = LazyLock::new(|| {
    DROPPED_ELEMENTS.iter().map(|t| re(&format!(r"(?is)<{t}\b[^>]*>.*?</{t}\s*>"))).collect()
});
static DROP_UNCLOSED: LazyLock<Vec<Regex>> =
    LazyLock::new(|| DROPPED_ELEMENTS.iter().map(|t| re(&format!(r"(?is)<{t}\b.*"))).collect());
static COMMENT: LazyLock<Regex> = LazyLock::new(|| re(r"(?s)<!--.*?(-->|$)"));
static DECLARATION: LazyLock<Regex> = LazyLock::new(|| re(r"(?s)<[!?][^>]*>?"));
static TAG: LazyLock<Regex> =
    LazyLock::new(|| re(r#"<(/?)([a-zA-Z][a-zA-Z0-9]*)(?:[^>"']|"[^"]*"|'[^']*')*>"#));
static WHITESPACE: LazyLock<Regex> = LazyLock::new(|| re(r"\s+"));
static ENTITY: LazyLock<Regex> = LazyLock::new(|| re(r"&(#[0-9]{1,7}|#[xX][0-9a-fA-F]{1,6}|[a-zA-Z]{2,8});"));
static SPACES: LazyLock<Regex> = LazyLock::new(|| re(r"[ \t]+"));
static BLANK_RUNS: LazyLock<Regex> = LazyLock::new(|| re(r"\n{3,}"));

/// Link constructs removed from every output, in order.
static LINK_PATTERNS: LazyLock<Vec<(Regex, &'static str)>> = LazyLock::new(|| {
    vec![
        (re(r"!?\[([^\]\n]*)\]\([^)\n]*\)"), "$1"),
        (re(r"\[([^\]\n]*)\]\[[^\]\n]*\]"), "$1"),
        (re(r"(?m)^[ \t]*\[[^\]\n]+\]:[ \t]*\S+.*$"), ""),
        (re(r"(?i)<(?:https?|ftp|mailto):[^>\s]*>"), ""),
        (re(r#"(?i)[a-z][a-z0-9+.-]*://[^\s<>"]*"#), ""),
        (re(r#"(?i)www\.[^\s<>"]+"#), ""),
        (re(r#"(?i)mailto:[^\s<>"]*"#), ""),
    ]
});

fn strip_links(text: &str) -> String {
    let mut out = text.to_string();
    for (pattern, replacement) in LINK_PATTERNS.iter() {
        if pattern.is_match(&out) {
            out = pattern.replace_all(&out, *replacement).into_owned();
        }
    }
    out
}

fn decode_entity(caps: &Captures) -> String {
    let body = &caps[1];
    let named = match body {
        "amp" => Some('&'),
        "lt" => Some('<'),
        "gt" => Some('>'),
        "quot" => Some('"'),
        "apos" => Some('\''),
        "nbsp" => Some(' '),
        "ndash" => Some('\u{2013}'),
        "mdash" => Some('\u{2014}'),
        "hellip" => Some('\u{2026}'),
        "lsquo" => Some('\u{2018}'),
        "rsquo" => Some('\u{2019}'),
        "ldquo" => Some('\u{201C}'),
        "rdquo" => Some('\u{201D}'),
        "copy" => Some('\u{00A9}'),
        _ => None,
    };
    let numeric = || {
        let code = match body.strip_prefix("#x").or_else(|| body.strip_prefix("#X")) {
            Some(hex) => u32::from_str_radix(hex, 16).ok(),
            None => body.strip_prefix('#').and_then(|d| d.parse().ok()),
        };
        code.and_then(char::from_u32)
    };
    match named.or_else(numeric) {
        Some(c) => c.to_string(),
        None => caps[0].to_string(),
    }
}

fn tag_replacement(caps: &Captures) -> &'static str {
    let closing = !caps[1].is_empty();
    let name = caps[2].to_ascii_lowercase();
    match name.as_str() {
        "br" => "\n",
        "hr" => "\n\n---\n\n",
        "li" if closing => "",
        "li" => "\n- ",
        "td" | "th" => " ",
        "h1" | "h2" | "h3" | "h4" | "h5" | "h6" if closing => "\n\n",
        "h1" => "\n\n# ",
        "h2" => "\n\n## ",
        "h3" => "\n\n### ",
        "h4" => "\n\n#### ",
        "h5" => "\n\n##### ",
        "h6" => "\n\n###### ",
        n if BLOCK_ELEMENTS.contains(&n) => "\n\n",
        _ => "",
    }
}

/// Readable, unclickable text for a page. Anchors keep their inner text,
/// scripts and styles are removed, and no link target survives. Input
/// without markup is returned as is (minus any link targets).
pub fn html_to_markdown(html: &str) -> String {
    if !html.contains('<') {
        return strip_links(html);
    }
    let mut s = COMMENT.replace_all(html, "").into_owned();
    for pattern in DROP_CLOSED.iter().chain(DROP_UNCLOSED.iter()) {
        s = pattern.replace_all(&s, "").into_owned();
    }
    s = DECLARATION.replace_all(&s, "").into_owned();
    s = WHITESPACE.replace_all(&s, " ").into_owned();
    s = TAG.replace_all(&s, tag_replacement).into_owned();
    s = ENTITY.replace_all(&s, decode_entity).into_owned();
    s = strip_links(&s);
    let lines: Vec<String> = s.lines().map(|l| SPACES.replace_all(l, " ").trim().to_string()).collect();
    BLANK_RUNS.replace_all(&lines.join("\n"), "\n\n").trim().to_string()
}

/// Longest char-boundary prefix of `text` within `limit` tokens; at least
/// one character so splitting always progresses.
fn fitting_prefix(text: &str, limit: usize, counter: &dyn TokenCounter) -> usize {
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).skip(1).chain([text.len()]).collect();
    let (mut lo, mut hi) = (0, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if counter.count(&text[..bounds[mid]]) <= limit {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    bounds[lo]
}

/// Breaks an oversized block at line boundaries, then at characters.
fn pieces<'a>(block: &'a str, limit: usize, counter: &dyn TokenCounter, out: &mut Vec<&'a str>) {
    if counter.count(block) <= limit {
        out.push(block);
        return;
    }
    let lines: Vec<&str> = block.split_inclusive('\n').collect();
    if lines.len() > 1 {
        for line in lines {
            pieces(line, limit, counter, out);
        }
        return;
    }
    let mut rest = block;
    while !rest.is_empty() {
        let cut = fitting_prefix(rest, limit, counter);
        out.push(&rest[..cut]);
        rest = &rest[cut..];
    }
}

/// Splits `markdown` into sections of at most `limit` tokens, preferring
/// paragraph then line boundaries. The sections concatenate to the input
/// byte for byte.
pub fn paginate(markdown: &str, limit: usize, counter: &dyn TokenCounter) -> Vec<String> {
    let limit = limit.max(1);
    let mut units = Vec::new();
    for block in markdown.split_inclusive("\n\n") {
        pieces(block, limit, counter, &mut units);
    }
    let mut sections = Vec::new();
    let mut current = String::new();
    for unit in units {
        let mut candidate = current.clone();
        candidate.push_str(unit);
        if current.is_empty() || counter.count(&candidate) <= limit {
            current = candidate;
        } else {
            sections.push(std::mem::replace(&mut current, unit.to_string()));
        }
    }
    if !current.is_empty() || sections.is_empty() {
        sections.push(current);
    }
    sections
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Section {
    /// 0-based.
    pub section_id: usize,
    pub text: String,
    pub token_count: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageDocument {
    pub url: String,
    pub markdown: String,
    pub sections: Vec<Section>,
    /// Seconds since the Unix epoch.
    pub fetched_at: u64,
}

/// One section as returned to the agent.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionContent {
    pub url: String,
    pub section_id: usize,
    pub total_sections: usize,
    pub text: String,
}

impl PageDocument {
    pub fn build(url: &str, html: &str, section_limit: usize, counter: &dyn TokenCounter) -> Self {
        let markdown = html_to_markdown(html);
        let sections = paginate(&markdown, section_limit, counter)
            .into_iter()
            .enumerate()
            .map(|(section_id, text)| Section { section_id, token_count: counter.count(&text), text })
            .collect();
        let fetched_at = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        Self { url: url.to_string(), markdown, sections, fetched_at }
    }

    pub fn section(&self, id: usize) -> Option<SectionContent> {
        self.sections.get(id).map(|s| SectionContent {
            url: self.url.clone(),
            section_id: id,
            total_sections: self.sections.len(),
            text: s.text.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FetchError {
    #[error("HTTP {0}")]
    Status(u16),
    #[error("network error: {0}")]
    Network(String),
}

pub trait PageFetcher: Send + Sync {
    /// Raw HTML for `url`.
    fn fetch(&self, url: &str) -> Result<String, FetchError>;
}

#[derive(Debug, Clone)]
pub struct HttpFetcher {
    http: reqwest::blocking::Client,
}

impl Default for HttpFetcher {
    fn default() -> Self {
        Self {
            http: reqwest::blocking::Client::builder()
                .timeout(Duration::from_secs(30))
                .user_agent("Mozilla/5.0 (compatible; sfr-research-agent)")
                .build()
                .expect("http client builds"),
        }
    }
}

impl PageFetcher for HttpFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        let resp = self.http.get(url).send().map_err(|e| FetchError::Network(e.to_string()))?;
        if !resp.status().is_success() {
            return Err(FetchError::Status(resp.status().as_u16()));
        }
        resp.text().map_err(|e| FetchError::Network(e.to_string()))
    }
}

/// Serves canned pages and counts fetches.
#[derive(Debug, Default)]
pub struct FixtureFetcher {
    pages: HashMap<String, String>,
    calls: AtomicUsize,
}

impl FixtureFetcher {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, url: &str, html: impl Into<String>) -> Self {
        self.pages.insert(url.to_string(), html.into());
        self
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl PageFetcher for FixtureFetcher {
    fn fetch(&self, url: &str) -> Result<String, FetchError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.pages.get(url).cloned().ok_or(FetchError::Status(404))
    }
}
