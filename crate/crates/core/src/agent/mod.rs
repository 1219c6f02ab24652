//! The trajectory state machine.
//!
//! An episode alternates between rendering a prompt from the packed memory,
//! asking the policy for a response, and applying the parsed action. Tool
//! calls are routed to the toolbox, `clean_memory` to the memory buffer, and
//! malformed responses through the repair/retry/inform protocol.

mod episode;
mod render;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::reward::RubricSpec;
use crate::toolbox::ToolResult;

pub use episode::{
    fault_protocol, replay, run_episode, run_from, Episode, EpisodeBudget, FaultCaps, FaultError,
    NextDirective, ReplayError, Resolution, RunContext, StepMeta, replay_prompts,
};
pub use render::{
    render_prompt, split_thinking, strip_thinking, ChatMessage, Prompt, RenderError, Role,
    ENTRY_FRAME_TOKENS, OVERFLOW_NOTICE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ShortFormQa,
    LongFormReport,
}

/// Reference used by the reward path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gold {
    Answer(String),
    Rubric(RubricSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Question {
    pub id: String,
    pub text: String,
    pub task_kind: TaskKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Gold>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AgentError {
    #[error("question {0:?} has empty text")]
    EmptyQuestion(String),
}

impl Question {
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        task_kind: TaskKind,
        gold: Option<Gold>,
    ) -> Result<Self, AgentError> {
        let (id, text) = (id.into(), text.into());
        if text.trim().is_empty() {
            return Err(AgentError::EmptyQuestion(id));
        }
        Ok(Self { id, text, task_kind, gold })
    }

    pub fn short_form(id: impl Into<String>, text: impl Into<String>, answer: impl Into<String>) -> Result<Self, AgentError> {
        Self::new(id, text, TaskKind::ShortFormQa, Some(Gold::Answer(answer.into())))
    }

    pub fn gold_answer(&self) -> Option<&str> {
        match &self.gold {
            Some(Gold::Answer(a)) => Some(a),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiagnosisKind {
    MisplacedSpecialToken,
    UnknownTool,
    BadParams,
    NoAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseDiagnosis {
    pub kind: DiagnosisKind,
    pub detail: String,
}

impl ParseDiagnosis {
    pub fn new(kind: DiagnosisKind, detail: impl Into<String>) -> Self {
        Self { kind, detail: detail.into() }
    }
}

/// Tool arguments, kept as a JSON object with sorted keys.
pub type ToolArgs = serde_json::Map<String, serde_json::Value>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentAction {
    ToolCall { name: String, args: ToolArgs },
    CleanMemory { content: String },
    FinalAnswer { text: String },
    Malformed { raw: String, diagnosis: ParseDiagnosis },
}

impl AgentAction {
    pub fn tool(name: impl Into<String>, args: serde_json::Value) -> Self {
        let args = match args {
            serde_json::Value::Object(map) => map,
            _ => ToolArgs::new(),
        };
        AgentAction::ToolCall { name: name.into(), args }
    }

    pub fn answer(text: impl Into<String>) -> Self {
        AgentAction::FinalAnswer { text: text.into() }
    }

    pub fn is_malformed(&self) -> bool {
        matches!(self, AgentAction::Malformed { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    /// 1-based.
    pub index: usize,
    pub model_response: String,
    pub action: AgentAction,
    pub tool_result: Option<ToolResult>,
    pub response_token_count: usize,
    /// Sequence log-probability of the response under the sampling policy.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logprob: Option<f64>,
    /// Discarded malformed responses before this one was accepted.
    #[serde(default)]
    pub retries: usize,
    /// Set when the accepted action came out of a deterministic repair.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repaired_from: Option<ParseDiagnosis>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answered,
    StepBudgetExceeded,
    ContextTruncated,
    FormatFailure,
    ToolFatal,
}

impl Termination {
    /// Terminations that make a rollout unusable for training.
    pub fn is_invalid(self) -> bool {
        !matches!(self, Termination::Answered)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "TrajectoryRecord", into = "TrajectoryRecord")]
pub struct Trajectory {
    pub question: Question,
    pub steps: Vec<Step>,
    pub final_answer: Option<String>,
    pub termination: Option<Termination>,
    pub reward: Option<f64>,
}

/// On-disk layout of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TrajectoryRecord {
    question_id: String,
    steps: Vec<Step>,
    final_answer: Option<String>,
    termination: Option<Termination>,
    reward: Option<f64>,
    question: Question,
}

impl From<TrajectoryRecord> for Trajectory {
    fn from(r: TrajectoryRecord) -> Self {
        Self {
            question: r.question,
            steps: r.steps,
            final_answer: r.final_answer,
            termination: r.termination,
            reward: r.reward,
        }
    }
}

impl From<Trajectory> for TrajectoryRecord {
    fn from(t: Trajectory) -> Self {
        Self {
            question_id: t.question.id.clone(),
            steps: t.steps,
            final_answer: t.final_answer,
            termination: t.termination,
            reward: t.reward,
            question: t.question,
        }
    }
}

impl Trajectory {
    pub fn new(question: Question) -> Self {
        Self { question, steps: Vec::new(), final_answer: None, termination: None, reward: None }
    }

    /// `T`, the number of steps.
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn is_terminated(&self) -> bool {
        self.termination.is_some()
    }

    /// Tool calls issued, by tool name.
    pub fn tool_call_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for step in &self.steps {
            if let AgentAction::ToolCall { name, .. } = &step.action {
                *counts.entry(name.clone()).or_insert(0) += 1;
            }
        }
        counts
    }

    pub fn total_response_tokens(&self) -> usize {
        self.steps.iter().map(|s| s.response_token_count).sum()
    }

    /// One JSON object on a single line.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trajectory serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CotPolicy {
    OmitPriorCot,
    KeepAllCot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RenderLayout {
    SingleTurnPacked,
    MultiTurnNative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RenderMode {
    pub layout: RenderLayout,
    pub cot: CotPolicy,
}

impl Default for RenderMode {
    fn default() -> Self {
        Self { layout: RenderLayout::SingleTurnPacked, cot: CotPolicy::OmitPriorCot }
    }
}

impl RenderMode {
    pub fn multi_turn() -> Self {
        Self { layout: RenderLayout::MultiTurnNative, cot: CotPolicy::OmitPriorCot }
    }
}
