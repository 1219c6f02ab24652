use std::collections::BTreeSet;
use std::path::Path;

use thiserror::Error;
use url::Url;

#[derive(Debug, Error)]
pub enum BlocklistError {
    #[error("cannot read blocklist {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Domain denylist. A domain blocks itself and every subdomain;
/// matching is case-insensitive.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blocklist {
    domains: BTreeSet<String>,
}

fn normalize_domain(raw: &str) -> Option<String> {
    let raw = raw.trim();
    let host = if raw.contains("://") {
        Url::parse(raw).ok()?.host_str()?.to_string()
    } else {
        raw.split('/').next()?.to_string()
    };
    let host = host.trim_start_matches("*.").trim_matches('.').to_ascii_lowercase();
    (!host.is_empty()).then_some(host)
}

/// Lowercased host of `url`; scheme-less input is read as http.
pub fn url_host(url: &str) -> Option<String> {
    let parsed = Url::parse(url.trim()).or_else(|_| Url::parse(&format!("http://{}", url.trim()))).ok()?;
    Some(parsed.host_str()?.trim_end_matches('.').to_ascii_lowercase())
}

impl Blocklist {
    pub fn new<S: AsRef<str>>(domains: impl IntoIterator<Item = S>) -> Self {
        Self { domains: domains.into_iter().filter_map(|d| normalize_domain(d.as_ref())).collect() }
    }

    /// One domain per line; `#` starts a comment.
    pub fn parse(text: &str) -> Self {
        Self::new(text.lines().map(|l| l.split('#').next().unwrap_or_default()).filter(|l| !l.trim().is_empty()))
    }

    pub fn load(path: &Path) -> Result<Self, BlocklistError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| BlocklistError::Io { path: path.display().to_string(), source })?;
        Ok(Self::parse(&text))
    }

    pub fn len(&self) -> usize {
        self.domains.len()
    }

    pub fn is_empty(&self) -> bool {
        self.domains.is_empty()
    }

    pub fn domains(&self) -> impl Iterator<Item = &str> {
        self.domains.iter().map(String::as_str)
    }

    pub fn is_blocked_host(&self, host: &str) -> bool {
        let host = host.trim_end_matches('.').to_ascii_lowercase();
        let mut rest = host.as_str();
        loop {
            if self.domains.contains(rest) {
                return true;
            }
            match rest.split_once('.') {
                Some((_, tail)) => rest = tail,
                None => return false,
            }
        }
    }

    pub fn is_blocked_url(&self, url: &str) -> bool {
        url_host(url).is_some_and(|h| self.is_blocked_host(&h))
    }
}
