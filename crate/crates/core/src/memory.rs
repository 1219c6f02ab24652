//! The agent-visible context memory.
//!
//! Prior steps are packed into an ordered list of entries. When the total
//! passes `L_mem` the buffer enters an overflow lockout: every tool call
//! except the memory tools is answered with a "memory overflow" error until
//! the agent replaces the history with `clean_memory`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentAction;
use crate::tokens::TokenCounter;

/// Names of the tools that operate on the memory itself.
pub const CLEAN_MEMORY: &str = "clean_memory";
pub const EDIT_MEMORY: &str = "edit_memory";
pub const DELETE_MEMORY: &str = "delete_memory";

/// Error text shown to the agent while the lockout is active.
pub const MEMORY_OVERFLOW: &str =
    "memory overflow: the context memory exceeds its buffer. Call clean_memory(content) to replace it before any other tool call.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContextBudget {
    /// Full context length `L`.
    pub total: usize,
    /// Memory threshold `L_mem`.
    pub memory: usize,
    /// Headroom kept free for generation.
    pub reserve: usize,
}

impl Default for ContextBudget {
    fn default() -> Self {
        Self { total: 4096, memory: 3072, reserve: 512 }
    }
}

impl ContextBudget {
    pub fn new(total: usize, memory: usize, reserve: usize) -> Result<Self, MemoryError> {
        let b = Self { total, memory, reserve };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), MemoryError> {
        if self.memory == 0 || self.memory >= self.total || self.memory + self.reserve > self.total {
            return Err(MemoryError::BadBudget(*self));
        }
        Ok(())
    }

    /// Largest snapshot `clean_memory` accepts.
    pub fn max_snapshot(&self) -> usize {
        self.memory / 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntryKind {
    ToolCallRecord,
    ToolResultRecord,
    CleanupSnapshot,
    SystemNotice,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub kind: EntryKind,
    pub text: String,
    pub token_count: usize,
    /// Trajectory step that produced the entry.
    pub step: usize,
}

impl MemoryEntry {
    pub fn new(kind: EntryKind, text: impl Into<String>, step: usize, counter: &dyn TokenCounter) -> Self {
        let text = text.into();
        let token_count = counter.count(&text) + crate::agent::ENTRY_FRAME_TOKENS;
        Self { kind, text, token_count, step }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum MemoryError {
    #[error("invalid context budget {0:?}")]
    BadBudget(ContextBudget),
    #[error("clean_memory content is empty")]
    EmptyCleanup,
    #[error("clean_memory content is {tokens} tokens; the limit is {limit}")]
    CleanupTooLarge { tokens: usize, limit: usize },
    #[error("no tool result at memory index {index} (memory has {len} entries)")]
    NoSuchEntry { index: usize, len: usize },
    #[error("replacement would grow memory past its {limit}-token buffer")]
    EditTooLarge { limit: usize },
}

/// Refusal returned by [`MemoryBuffer::overflow_gate`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("memory overflow")]
pub struct MemoryOverflowError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryBuffer {
    pub budget: ContextBudget,
    /// Tokens taken by the question; counts toward the total.
    pub question_tokens: usize,
    entries: Vec<MemoryEntry>,
    entry_tokens: usize,
    cleanup_count: usize,
    overflow: bool,
    /// One-shot notice shown under the memory on the next render only; not
    /// part of the total.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transient: Option<String>,
}

impl MemoryBuffer {
    pub fn new(budget: ContextBudget, question_tokens: usize) -> Self {
        let mut b = Self {
            budget,
            question_tokens,
            entries: Vec::new(),
            entry_tokens: 0,
            cleanup_count: 0,
            overflow: false,
            transient: None,
        };
        b.refresh_flag();
        b
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `K`, the number of successful cleanups so far.
    pub fn cleanup_count(&self) -> usize {
        self.cleanup_count
    }

    pub fn is_overflowing(&self) -> bool {
        self.overflow
    }

    pub fn transient(&self) -> Option<&str> {
        self.transient.as_deref()
    }

    pub fn set_transient(&mut self, text: impl Into<String>) {
        self.transient = Some(text.into());
    }

    pub fn clear_transient(&mut self) {
        self.transient = None;
    }

    /// Question plus entry tokens, maintained incrementally.
    pub fn total(&self) -> usize {
        self.question_tokens + self.entry_tokens
    }

    /// Same as [`Self::total`], recomputed from the entries.
    pub fn recompute_total(&self) -> usize {
        self.question_tokens + self.entries.iter().map(|e| e.token_count).sum::<usize>()
    }

    fn refresh_flag(&mut self) {
        self.overflow = self.total() > self.budget.memory;
    }

    pub fn append(&mut self, entry: MemoryEntry) {
        self.entry_tokens += entry.token_count;
        self.entries.push(entry);
        self.refresh_flag();
    }

    /// Tokens that can still be appended before a rendered prompt would
    /// pass `L - reserve`, given the fixed rendering overhead.
    pub fn space_left(&self, fixed_overhead: usize) -> usize {
        (self.budget.total - self.budget.reserve)
            .saturating_sub(fixed_overhead)
            .saturating_sub(self.total())
    }

    /// Whether `action` may proceed. During the lockout only the memory
    /// tools and a final answer (not a tool call) get through.
    pub fn overflow_gate(&self, action: &AgentAction) -> Result<(), MemoryOverflowError> {
        if !self.overflow {
            return Ok(());
        }
        match action {
            AgentAction::CleanMemory { .. } | AgentAction::FinalAnswer { .. } => Ok(()),
            AgentAction::ToolCall { name, .. } if name == EDIT_MEMORY || name == DELETE_MEMORY => Ok(()),
            _ => Err(MemoryOverflowError),
        }
    }

    /// Replaces the whole history with a snapshot of `content` and a notice
    /// describing the cleanup. Older notices go too: they only describe
    /// erased records. The buffer is left untouched on error.
    pub fn apply_cleanup(&mut self, content: &str, step: usize, counter: &dyn TokenCounter) -> Result<(), MemoryError> {
        if content.trim().is_empty() {
            return Err(MemoryError::EmptyCleanup);
        }
        let tokens = counter.count(content);
        let limit = self.budget.max_snapshot();
        if tokens > limit {
            return Err(MemoryError::CleanupTooLarge { tokens, limit });
        }
        self.cleanup_count += 1;
        let mut kept = Vec::with_capacity(2);
        kept.push(MemoryEntry::new(EntryKind::CleanupSnapshot, content, step, counter));
        kept.push(MemoryEntry::new(
            EntryKind::SystemNotice,
            format!("memory cleaned at step {step} (cleanup #{}); earlier tool results were erased", self.cleanup_count),
            step,
            counter,
        ));
        self.entries = kept;
        self.entry_tokens = self.entries.iter().map(|e| e.token_count).sum();
        self.refresh_flag();
        Ok(())
    }

    /// Edits (`Some`) or deletes (`None`) the tool result at `index`. A
    /// deleted result leaves a tombstone notice in its slot.
    pub fn edit_or_delete_entry(
        &mut self,
        index: usize,
        replacement: Option<&str>,
        step: usize,
        counter: &dyn TokenCounter,
    ) -> Result<(), MemoryError> {
        let len = self.entries.len();
        match self.entries.get(index) {
            Some(e) if e.kind == EntryKind::ToolResultRecord => {}
            _ => return Err(MemoryError::NoSuchEntry { index, len }),
        }
        let old = &self.entries[index];
        let new = match replacement {
            Some(text) => MemoryEntry::new(EntryKind::ToolResultRecord, text, old.step, counter),
            None => MemoryEntry::new(
                EntryKind::SystemNotice,
                format!("[tool result from step {} deleted at step {step}]", old.step),
                old.step,
                counter,
            ),
        };
        let after = self.total() - old.token_count + new.token_count;
        if new.token_count > old.token_count && after > self.budget.memory {
            return Err(MemoryError::EditTooLarge { limit: self.budget.memory });
        }
        self.entry_tokens = self.entry_tokens - old.token_count + new.token_count;
        self.entries[index] = new;
        self.refresh_flag();
        Ok(())
    }

    /// Step of the most recent snapshot, if any.
    pub fn latest_cleanup_step(&self) -> Option<usize> {
        self.entries.iter().rev().find(|e| e.kind == EntryKind::CleanupSnapshot).map(|e| e.step)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokens::CharProxyCounter;

    fn entry(kind: EntryKind, chars: usize, step: usize) -> MemoryEntry {
        MemoryEntry::new(kind, "x".repeat(chars), step, &CharProxyCounter)
    }

    #[test]
    fn append_to_empty_sets_total() {
        let mut b = MemoryBuffer::new(ContextBudget::default(), 0);
        let e = entry(EntryKind::ToolResultRecord, 40, 1);
        let t = e.token_count;
        b.append(e);
        assert_eq!(b.total(), t);
    }

    #[test]
    fn crossing_the_threshold_sets_the_flag() {
        let budget = ContextBudget::default();
        let mut b = MemoryBuffer::new(budget, budget.memory - 1);
        assert!(!b.is_overflowing());
        // 6 tokens including the frame allowance
        let e = MemoryEntry { kind: EntryKind::ToolResultRecord, text: "y".into(), token_count: 6, step: 1 };
        b.append(e);
        assert_eq!(b.total(), budget.memory + 5);
        assert!(b.is_overflowing());
    }

    #[test]
    fn gate_blocks_tools_but_not_cleanup_during_overflow() {
        let budget = ContextBudget::default();
        let mut b = MemoryBuffer::new(budget, 0);
        let search = AgentAction::tool("search_internet", serde_json::json!({"query": "q"}));
        assert!(b.overflow_gate(&search).is_ok());
        b.append(MemoryEntry { kind: EntryKind::ToolResultRecord, text: "z".into(), token_count: budget.memory + 1, step: 1 });
        assert_eq!(b.overflow_gate(&search), Err(MemoryOverflowError));
        assert!(b.overflow_gate(&AgentAction::CleanMemory { content: "s".into() }).is_ok());
        assert!(b.overflow_gate(&AgentAction::answer("a")).is_ok());
    }

    #[test]
    fn cleanup_replaces_records_and_increments_k() {
        let c = CharProxyCounter;
        let mut b = MemoryBuffer::new(ContextBudget::default(), 10);
        b.append(MemoryEntry::new(EntryKind::SystemNotice, "note", 0, &c));
        for step in 1..=3 {
            b.append(entry(EntryKind::ToolCallRecord, 20, step));
            b.append(entry(EntryKind::ToolResultRecord, 200, step));
        }
        assert_eq!(b.len(), 7);
        b.apply_cleanup("summary", 4, &c).unwrap();
        assert_eq!(b.cleanup_count(), 1);
        let kinds: Vec<EntryKind> = b.entries().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EntryKind::CleanupSnapshot, EntryKind::SystemNotice]);
        assert_eq!(b.entries().iter().filter(|e| e.kind == EntryKind::CleanupSnapshot).count(), 1);
        assert_eq!(b.total(), b.recompute_total());
    }

    #[test]
    fn oversized_cleanup_is_rejected_without_change() {
        let c = CharProxyCounter;
        let budget = ContextBudget::default();
        let mut b = MemoryBuffer::new(budget, 0);
        b.append(entry(EntryKind::ToolResultRecord, 100, 1));
        let before = b.clone();
        let big = "w".repeat((budget.memory + 1) * 4);
        assert!(matches!(b.apply_cleanup(&big, 2, &c), Err(MemoryError::CleanupTooLarge { .. })));
        assert_eq!(b, before);
        assert_eq!(b.apply_cleanup(" ", 2, &c), Err(MemoryError::EmptyCleanup));
    }

    #[test]
    fn second_cleanup_drops_first_snapshot() {
        let c = CharProxyCounter;
        let mut b = MemoryBuffer::new(ContextBudget::default(), 0);
        b.apply_cleanup("first summary alpha", 1, &c).unwrap();
        b.append(entry(EntryKind::ToolResultRecord, 10, 2));
        b.apply_cleanup("second summary beta", 3, &c).unwrap();
        let snapshots: Vec<&str> = b
            .entries()
            .iter()
            .filter(|e| e.kind == EntryKind::CleanupSnapshot)
            .map(|e| e.text.as_str())
            .collect();
        assert_eq!(snapshots, vec!["second summary beta"]);
        assert!(!b.entries().iter().any(|e| e.text.contains("alpha")));
        assert_eq!(b.cleanup_count(), 2);
    }

    #[test]
    fn delete_leaves_tombstone_and_edit_shrinks() {
        let c = CharProxyCounter;
        let mut b = MemoryBuffer::new(ContextBudget::default(), 0);
        b.append(entry(EntryKind::ToolCallRecord, 10, 1));
        b.append(entry(EntryKind::ToolResultRecord, 400, 1));
        b.append(entry(EntryKind::ToolCallRecord, 10, 2));
        b.append(entry(EntryKind::ToolResultRecord, 400, 2));
        b.edit_or_delete_entry(3, None, 3, &c).unwrap();
        assert_eq!(b.len(), 4);
        assert_eq!(b.entries()[3].kind, EntryKind::SystemNotice);
        assert!(b.entries()[3].text.contains("deleted"));

        let before = b.total();
        b.edit_or_delete_entry(1, Some("short"), 4, &c).unwrap();
        assert!(b.total() < before);
        assert_eq!(b.total(), b.recompute_total());

        assert_eq!(b.edit_or_delete_entry(99, None, 5, &c), Err(MemoryError::NoSuchEntry { index: 99, len: 4 }));
        // call records are not editable
        assert!(b.edit_or_delete_entry(0, None, 5, &c).is_err());
    }

    #[test]
    fn budget_validation() {
        assert!(ContextBudget::new(4096, 3072, 512).is_ok());
        assert!(ContextBudget::new(100, 100, 0).is_err());
        assert!(ContextBudget::new(100, 90, 20).is_err());
    }
}
