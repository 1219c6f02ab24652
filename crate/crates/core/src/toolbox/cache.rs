use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use url::Url;

use super::{ToolFatal, ToolResult};
use crate::agent::ToolArgs;

/// Store file inside the cache directory.
pub const CACHE_FILE: &str = "tool_cache.jsonl";

#[derive(Debug, Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    tool: String,
    args: Value,
    result: ToolResult,
    stored_at: u64,
}

/// Argument normal form: sorted keys, whitespace-collapsed queries and
/// URLs with a lowercased host.
pub fn canonical_args(args: &ToolArgs) -> Value {
    let mut out = serde_json::Map::new();
    let mut keys: Vec<&String> = args.keys().collect();
    keys.sort();
    for k in keys {
        let v = &args[k];
        let v = match (k.as_str(), v.as_str()) {
            ("query", Some(q)) => Value::from(q.split_whitespace().collect::<Vec<_>>().join(" ")),
            ("url", Some(u)) => Value::from(Url::parse(u.trim()).map(|p| p.to_string()).unwrap_or_else(|_| u.trim().to_string())),
            _ => v.clone(),
        };
        out.insert(k.clone(), v);
    }
    Value::Object(out)
}

pub fn cache_key(tool: &str, args: &ToolArgs) -> String {
    let mut h = Sha256::new();
    h.update(tool.as_bytes());
    h.update([0u8]);
    h.update(canonical_args(args).to_string().as_bytes());
    hex::encode(h.finalize())
}

type Slot = Arc<Mutex<Option<ToolResult>>>;

/// Persistent get-or-compute store for tool results. Concurrent identical
/// calls compute once; store faults never fail a call.
#[derive(Debug, Default)]
pub struct ToolCache {
    path: Option<PathBuf>,
    slots: Mutex<HashMap<String, Slot>>,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl ToolCache {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Opens (or creates) the store in `dir`. Unreadable lines, such as a
    /// torn final write, are skipped.
    pub fn open(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(CACHE_FILE);
        let mut slots = HashMap::new();
        if path.exists() {
            for (i, line) in fs::read_to_string(&path)?.lines().enumerate() {
                match serde_json::from_str::<CacheRecord>(line) {
                    Ok(rec) => {
                        slots.insert(rec.key, Arc::new(Mutex::new(Some(rec.result))));
                    }
                    Err(e) => log::warn!("{}:{}: skipping unreadable cache line: {e}", path.display(), i + 1),
                }
            }
        }
        Ok(Self { path: Some(path), slots: Mutex::new(slots), ..Default::default() })
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn len(&self) -> usize {
        let slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
        slots.values().filter(|s| s.lock().map(|g| g.is_some()).unwrap_or(false)).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::SeqCst)
    }

    pub fn get(&self, tool: &str, args: &ToolArgs) -> Option<ToolResult> {
        let slot = self.slots.lock().unwrap_or_else(|e| e.into_inner()).get(&cache_key(tool, args)).cloned()?;
        let guard = slot.lock().unwrap_or_else(|e| e.into_inner());
        guard.clone()
    }

    pub fn get_or_compute(
        &self,
        tool: &str,
        args: &ToolArgs,
        compute: impl FnOnce() -> Result<ToolResult, ToolFatal>,
    ) -> Result<ToolResult, ToolFatal> {
        let key = cache_key(tool, args);
        let slot = {
            let mut slots = self.slots.lock().unwrap_or_else(|e| e.into_inner());
            slots.entry(key.clone()).or_default().clone()
        };
        let mut guard = slot.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(hit) = guard.as_ref() {
            self.hits.fetch_add(1, Ordering::SeqCst);
            return Ok(hit.clone());
        }
        self.misses.fetch_add(1, Ordering::SeqCst);
        let result = compute()?;
        if result.is_cacheable() {
            *guard = Some(result.clone());
            self.persist(CacheRecord {
                key,
                tool: tool.to_string(),
                args: canonical_args(args),
                result: result.clone(),
                stored_at: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
            });
        }
        Ok(result)
    }

    fn persist(&self, record: CacheRecord) {
        let Some(path) = &self.path else { return };
        let line = match serde_json::to_string(&record) {
            Ok(l) => l,
            Err(e) => return log::warn!("cache record not serializable: {e}"),
        };
        let written = OpenOptions::new().create(true).append(true).open(path).and_then(|mut f| writeln!(f, "{line}"));
        if let Err(e) = written {
            log::warn!("cache store {} not writable: {e}", path.display());
        }
    }

    /// Drops every entry, in memory and on disk.
    pub fn purge(&self) -> std::io::Result<()> {
        self.slots.lock().unwrap_or_else(|e| e.into_inner()).clear();
        match &self.path {
            Some(p) if p.exists() => fs::remove_file(p),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn args(v: Value) -> ToolArgs {
        v.as_object().unwrap().clone()
    }

    #[test]
    fn key_ignores_order_and_spacing() {
        assert_eq!(cache_key("t", &args(json!({"a": 1, "b": 2}))), cache_key("t", &args(json!({"b": 2, "a": 1}))));
        assert_eq!(
            cache_key("search_internet", &args(json!({"query": "  rust   lang "}))),
            cache_key("search_internet", &args(json!({"query": "rust lang"})))
        );
        assert_eq!(
            cache_key("browse_page", &args(json!({"url": "https://EXAMPLE.com/Path", "section_id": 0}))),
            cache_key("browse_page", &args(json!({"url": "https://example.com/Path", "section_id": 0})))
        );
        assert_ne!(cache_key("a", &args(json!({}))), cache_key("b", &args(json!({}))));
    }

    #[test]
    fn errors_are_not_cached() {
        let cache = ToolCache::in_memory();
        let a = args(json!({"query": "q"}));
        let mut calls = 0;
        for _ in 0..2 {
            cache.get_or_compute("search_internet", &a, || {
                calls += 1;
                Ok(ToolResult::error("down"))
            }).unwrap();
        }
        assert_eq!(calls, 2);
        assert!(cache.is_empty());
    }
}
