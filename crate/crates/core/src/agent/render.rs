use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{CotPolicy, RenderLayout, RenderMode, Trajectory};
use crate::memory::{EntryKind, MemoryBuffer};
use crate::tokens::TokenCounter;

/// Upper bound, in tokens, on the framing text the renderer wraps around a
/// single memory entry (headers, separators, message envelope).
pub const ENTRY_FRAME_TOKENS: usize = 12;

/// Largest one-shot notice (e.g. a failed cleanup) shown under the memory.
pub(crate) const TRANSIENT_TOKENS: usize = 64;

/// Per-message envelope charge used when counting prompt tokens.
const MESSAGE_FRAME_TOKENS: usize = 4;

/// Appended to the prompt while the memory lockout is active.
pub const OVERFLOW_NOTICE: &str =
    "[system notice] Your memory exceeds its buffer. Call clean_memory(content) with a concise summary of everything you still need; other tool calls will fail until you do.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
    Tool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prompt {
    pub messages: Vec<ChatMessage>,
    pub token_count: usize,
}

impl Prompt {
    pub fn user_segments(&self) -> usize {
        self.messages.iter().filter(|m| m.role == Role::User).count()
    }

    /// All message contents joined, for inspection.
    pub fn text(&self) -> String {
        self.messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
    }

    pub fn count_tokens(messages: &[ChatMessage], counter: &dyn TokenCounter) -> usize {
        messages.iter().map(|m| counter.count(&m.content) + MESSAGE_FRAME_TOKENS).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RenderError {
    #[error("rendered prompt is {tokens} tokens; the context holds {limit}")]
    BudgetExceeded { tokens: usize, limit: usize },
    #[error("cannot render a trajectory that already has a final answer")]
    AlreadyAnswered,
}

/// Splits `response` into (thinking, remainder). Every `open ... close` span
/// counts as thinking; an unclosed `open` runs to the end of the text.
pub fn split_thinking(response: &str, delimiters: (&str, &str)) -> (String, String) {
    let (open, close) = delimiters;
    let mut thinking = String::new();
    let mut rest = String::new();
    let mut tail = response;
    while let Some(start) = tail.find(open) {
        rest.push_str(&tail[..start]);
        let after = &tail[start + open.len()..];
        match after.find(close) {
            Some(end) => {
                thinking.push_str(&after[..end]);
                tail = &after[end + close.len()..];
            }
            None => {
                thinking.push_str(after);
                tail = "";
            }
        }
    }
    rest.push_str(tail);
    (thinking, rest)
}

pub fn strip_thinking(response: &str, delimiters: (&str, &str)) -> String {
    split_thinking(response, delimiters).1
}

fn entry_header(kind: EntryKind, step: usize) -> String {
    match kind {
        EntryKind::ToolCallRecord => format!("\n\n### Step {step} action\n"),
        EntryKind::ToolResultRecord => format!("\n\n### Step {step} result\n"),
        EntryKind::CleanupSnapshot => format!("\n\n### Memory (step {step})\n"),
        EntryKind::SystemNotice => "\n\n### Notice\n".to_string(),
    }
}

/// Renders the prompt for the next step.
///
/// `SingleTurnPacked` produces a system message and exactly one user message
/// holding the question followed by the packed memory. `MultiTurnNative`
/// maps memory entries onto alternating assistant/tool turns. Thinking from
/// earlier steps is only included under `KeepAllCot`; memory entries never
/// carry it.
pub fn render_prompt(
    prefix: &Trajectory,
    memory: &MemoryBuffer,
    mode: RenderMode,
    system: &str,
    thinking_delimiters: (&str, &str),
    counter: &dyn TokenCounter,
) -> Result<Prompt, RenderError> {
    if prefix.final_answer.is_some() {
        return Err(RenderError::AlreadyAnswered);
    }
    let thinking: HashMap<usize, String> = match mode.cot {
        CotPolicy::OmitPriorCot => HashMap::new(),
        CotPolicy::KeepAllCot => prefix
            .steps
            .iter()
            .map(|s| (s.index, split_thinking(&s.model_response, thinking_delimiters).0))
            .filter(|(_, t)| !t.is_empty())
            .collect(),
    };
    let (open, close) = thinking_delimiters;
    let call_text = |step: usize, text: &str| match thinking.get(&step) {
        Some(t) => format!("{open}{t}{close}{text}"),
        None => text.to_string(),
    };

    let mut messages = vec![ChatMessage::new(Role::System, system)];
    match mode.layout {
        RenderLayout::SingleTurnPacked => {
            let mut user = prefix.question.text.clone();
            for e in memory.entries() {
                user.push_str(&entry_header(e.kind, e.step));
                match e.kind {
                    EntryKind::ToolCallRecord => user.push_str(&call_text(e.step, &e.text)),
                    _ => user.push_str(&e.text),
                }
            }
            if memory.is_overflowing() {
                user.push_str("\n\n");
                user.push_str(OVERFLOW_NOTICE);
            }
            if let Some(t) = memory.transient() {
                user.push_str("\n\n");
                user.push_str(t);
            }
            messages.push(ChatMessage::new(Role::User, user));
        }
        RenderLayout::MultiTurnNative => {
            messages.push(ChatMessage::new(Role::User, prefix.question.text.clone()));
            for (i, e) in memory.entries().iter().enumerate() {
                let msg = match e.kind {
                    EntryKind::ToolCallRecord => ChatMessage::new(Role::Assistant, call_text(e.step, &e.text)),
                    EntryKind::ToolResultRecord => ChatMessage::new(Role::Tool, format!("[memory #{i}] {}", e.text)),
                    EntryKind::CleanupSnapshot => ChatMessage::new(Role::User, format!("Memory:\n{}", e.text)),
                    EntryKind::SystemNotice => ChatMessage::new(Role::User, format!("Notice: {}", e.text)),
                };
                messages.push(msg);
            }
            if memory.is_overflowing() {
                messages.push(ChatMessage::new(Role::User, OVERFLOW_NOTICE));
            }
            if let Some(t) = memory.transient() {
                messages.push(ChatMessage::new(Role::User, t));
            }
        }
    }
    let token_count = Prompt::count_tokens(&messages, counter);
    let limit = memory.budget.total;
    if token_count > limit {
        return Err(RenderError::BudgetExceeded { tokens: token_count, limit });
    }
    Ok(Prompt { messages, token_count })
}

/// Tokens a prompt spends outside the memory entries and the question.
pub(crate) fn fixed_overhead(system: &str, counter: &dyn TokenCounter) -> usize {
    counter.count(system)
        + counter.count(OVERFLOW_NOTICE)
        + TRANSIENT_TOKENS
        + 4 * MESSAGE_FRAME_TOKENS
        + ENTRY_FRAME_TOKENS
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_handles_closed_unclosed_and_absent() {
        let d = ("<think>", "</think>");
        assert_eq!(split_thinking("<think>a</think>b", d), ("a".into(), "b".into()));
        assert_eq!(split_thinking("x<think>a", d), ("a".into(), "x".into()));
        assert_eq!(split_thinking("plain", d), ("".into(), "plain".into()));
        assert_eq!(split_thinking("<think>1</think>m<think>2</think>n", d), ("12".into(), "mn".into()));
    }

    #[test]
    fn header_fits_frame_allowance() {
        let c = crate::tokens::CharProxyCounter;
        for kind in [EntryKind::ToolCallRecord, EntryKind::ToolResultRecord, EntryKind::CleanupSnapshot, EntryKind::SystemNotice] {
            let h = entry_header(kind, 123_456);
            assert!(c.count(&h) + MESSAGE_FRAME_TOKENS <= ENTRY_FRAME_TOKENS, "{h:?}");
        }
        assert!(c.count("[memory #123456] ") + MESSAGE_FRAME_TOKENS <= ENTRY_FRAME_TOKENS);
    }
}
