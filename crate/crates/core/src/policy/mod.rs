//! Policy abstraction and action parsing.
//!
//! A [`Policy`] turns a rendered prompt into raw model text. The grammar
//! functions turn that text into an [`AgentAction`], diagnose malformed
//! responses and attempt the deterministic repairs.

mod client;
mod grammar;
mod registry;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{AgentAction, Prompt, RenderLayout, RenderMode};

pub use client::{ChatClient, RetryPolicy, API_BASE_ENV, API_KEY_ENV};
pub use grammar::{attempt_repair, parse_action, serialize_action, Irreparable, ParsedAction};
pub use registry::{ParamType, ToolRegistry, ToolSpec, BROWSE_PAGE, CODE_INTERPRETER, SEARCH_INTERNET};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ToolGrammar {
    /// `<tool_call>{"name": .., "arguments": {..}}</tool_call>` or
    /// `<answer>..</answer>`.
    TaggedToolCall,
    /// A JSON object `{"tool_call": {"name": .., "arguments": {..}}}` or
    /// `{"answer": ..}`, as produced from structured endpoint tool calls.
    NativeFunctionCall,
}

impl ToolGrammar {
    /// One-line reminder of the reply format, used in error messages.
    pub fn format_hint(self) -> &'static str {
        match self {
            ToolGrammar::TaggedToolCall => {
                r#"<tool_call>{"name": "<tool>", "arguments": {...}}</tool_call> or <answer>...</answer>"#
            }
            ToolGrammar::NativeFunctionCall => {
                r#"{"tool_call": {"name": "<tool>", "arguments": {...}}} or {"answer": "..."}"#
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ThinkingDelimiters {
    pub open: String,
    pub close: String,
}

impl Default for ThinkingDelimiters {
    fn default() -> Self {
        Self { open: "<think>".into(), close: "</think>".into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GenerationLimits {
    pub max_tokens: usize,
    pub temperature: f64,
}

impl Default for GenerationLimits {
    fn default() -> Self {
        Self { max_tokens: 512, temperature: 0.6 }
    }
}

/// Per-model-family inference setup. Fixed for the duration of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyProfile {
    pub name: String,
    #[serde(default)]
    pub render_mode: RenderMode,
    pub tool_grammar: ToolGrammar,
    #[serde(default)]
    pub thinking_delimiters: ThinkingDelimiters,
    #[serde(default)]
    pub generation: GenerationLimits,
}

impl Default for PolicyProfile {
    fn default() -> Self {
        Self::single_turn()
    }
}

impl PolicyProfile {
    /// Packed single-turn prompts with the tagged grammar.
    pub fn single_turn() -> Self {
        Self {
            name: "single-turn".into(),
            render_mode: RenderMode::default(),
            tool_grammar: ToolGrammar::TaggedToolCall,
            thinking_delimiters: ThinkingDelimiters::default(),
            generation: GenerationLimits::default(),
        }
    }

    /// Native multi-turn chat with structured tool calls and the memory
    /// edit/delete tools.
    pub fn multi_turn() -> Self {
        Self {
            name: "multi-turn".into(),
            render_mode: RenderMode::multi_turn(),
            tool_grammar: ToolGrammar::NativeFunctionCall,
            ..Self::single_turn()
        }
    }

    pub fn delimiters(&self) -> (&str, &str) {
        (&self.thinking_delimiters.open, &self.thinking_delimiters.close)
    }

    pub fn registry(&self) -> ToolRegistry {
        match self.render_mode.layout {
            RenderLayout::SingleTurnPacked => ToolRegistry::single_turn(),
            RenderLayout::MultiTurnNative => ToolRegistry::multi_turn(),
        }
    }

    pub fn system_prompt(&self) -> String {
        let mut s = String::from(
            "You are a research agent. Answer the question using the tools, one call per reply.\nTools:\n",
        );
        for tool in self.registry().tools() {
            s.push_str(&format!("- {}: {}\n", tool.signature(), tool.description));
        }
        let (open, close) = self.delimiters();
        s.push_str(&format!(
            "Think inside {open}...{close}, then reply with exactly one of: {}",
            self.tool_grammar.format_hint()
        ));
        s
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: usize,
    pub completion_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    /// Sequence log-probability, when the endpoint reports one.
    pub logprob: Option<f64>,
    pub usage: Usage,
}

impl Completion {
    pub fn text(text: impl Into<String>) -> Self {
        Self { text: text.into(), logprob: None, usage: Usage::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PolicyError {
    #[error("endpoint unavailable: {0}")]
    EndpointUnavailable(String),
    #[error("context length exceeded: {0}")]
    ContextLengthExceeded(String),
    #[error("bad endpoint response: {0}")]
    BadResponse(String),
    #[error("policy configuration: {0}")]
    Config(String),
}

/// Produces raw model text for a prompt.
pub trait Policy: Send {
    fn complete(&mut self, prompt: &Prompt) -> Result<Completion, PolicyError>;
}

/// Replays a fixed list of responses. Once exhausted it answers
/// `<script-exhausted>`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScriptedPolicy {
    script: Vec<String>,
    cursor: usize,
    grammar: ToolGrammar,
    prompts: Vec<Prompt>,
}

pub const SCRIPT_EXHAUSTED: &str = "<script-exhausted>";

impl ScriptedPolicy {
    pub fn new<S: Into<String>>(script: impl IntoIterator<Item = S>) -> Self {
        Self {
            script: script.into_iter().map(Into::into).collect(),
            cursor: 0,
            grammar: ToolGrammar::TaggedToolCall,
            prompts: Vec::new(),
        }
    }

    pub fn with_grammar(mut self, grammar: ToolGrammar) -> Self {
        self.grammar = grammar;
        self
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    /// Prompts seen so far, in order.
    pub fn prompts(&self) -> &[Prompt] {
        &self.prompts
    }
}

impl Policy for ScriptedPolicy {
    fn complete(&mut self, prompt: &Prompt) -> Result<Completion, PolicyError> {
        self.prompts.push(prompt.clone());
        let text = match self.script.get(self.cursor) {
            Some(t) => t.clone(),
            None => {
                let profile = PolicyProfile { tool_grammar: self.grammar, ..PolicyProfile::single_turn() };
                serialize_action(&profile, &AgentAction::answer(SCRIPT_EXHAUSTED))
            }
        };
        self.cursor += 1;
        Ok(Completion::text(text))
    }
}

impl<P: Policy + ?Sized> Policy for Box<P> {
    fn complete(&mut self, prompt: &Prompt) -> Result<Completion, PolicyError> {
        (**self).complete(prompt)
    }
}
