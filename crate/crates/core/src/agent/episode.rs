use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::render::{fixed_overhead, render_prompt, Prompt, RenderError};
use super::{AgentAction, DiagnosisKind, ParseDiagnosis, Question, Step, Termination, ToolArgs, Trajectory};
use crate::memory::{ContextBudget, EntryKind, MemoryBuffer, MemoryEntry, DELETE_MEMORY, EDIT_MEMORY, MEMORY_OVERFLOW};
use crate::policy::{attempt_repair, parse_action, serialize_action, Policy, PolicyError, PolicyProfile};
use crate::tokens::{default_counter, SharedCounter, TokenCounter};
use crate::toolbox::{ToolExecutor, ToolResult};

/// Appended to a truncated memory record.
const CLIP_MARK: &str = "\n[... truncated]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeBudget {
    pub max_steps: usize,
    /// Wall-clock cap for one `run_from` call.
    pub wall_clock: Option<Duration>,
}

impl Default for EpisodeBudget {
    fn default() -> Self {
        Self { max_steps: 64, wall_clock: Some(Duration::from_secs(30 * 60)) }
    }
}

/// Bounds on the repair/retry/inform protocol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FaultCaps {
    /// Discarded resamples before a syntax error is shown to the agent.
    pub retry_cap: usize,
    /// Consecutive malformed responses (recorded or discarded) that end the
    /// episode with `FormatFailure`.
    pub hard_cap: usize,
}

impl Default for FaultCaps {
    fn default() -> Self {
        Self { retry_cap: 2, hard_cap: 4 }
    }
}

/// Everything an episode needs besides the policy and the tools.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub profile: PolicyProfile,
    pub context: ContextBudget,
    pub budget: EpisodeBudget,
    pub caps: FaultCaps,
    pub counter: SharedCounter,
    pub system_prompt: String,
}

impl RunContext {
    pub fn new(profile: PolicyProfile) -> Self {
        let system_prompt = profile.system_prompt();
        Self {
            profile,
            context: ContextBudget::default(),
            budget: EpisodeBudget::default(),
            caps: FaultCaps::default(),
            counter: default_counter(),
            system_prompt,
        }
    }

    pub fn with_context(mut self, context: ContextBudget) -> Self {
        self.context = context;
        self
    }

    pub fn with_max_steps(mut self, max_steps: usize) -> Self {
        self.budget.max_steps = max_steps;
        self
    }
}

/// What the caller must do after [`Episode::apply_action`].
#[derive(Debug, Clone, PartialEq)]
pub enum NextDirective {
    ExecuteTool { name: String, args: ToolArgs },
    FaultProtocol { raw: String, diagnosis: ParseDiagnosis },
    Continue,
    Done(Termination),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Resolution {
    /// The repaired action and the diagnosis it was repaired from.
    Repaired(AgentAction, ParseDiagnosis),
    RetrySameStep,
    /// Message shown to the agent as the step's observation.
    InjectError(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum FaultError {
    #[error("{attempt} consecutive malformed responses; format failure")]
    FormatFailure { attempt: usize },
}

/// Decides how to handle a malformed response. `attempt` counts the
/// malformed responses since the last well-formed action.
pub fn fault_protocol(
    profile: &PolicyProfile,
    raw: &str,
    diagnosis: &ParseDiagnosis,
    attempt: usize,
    caps: FaultCaps,
) -> Result<Resolution, FaultError> {
    if attempt >= caps.hard_cap {
        return Err(FaultError::FormatFailure { attempt });
    }
    let tools = profile.registry().names().join(", ");
    match diagnosis.kind {
        DiagnosisKind::UnknownTool => Ok(Resolution::InjectError(format!(
            "Error: unknown tool ({}). Available tools: {tools}.",
            diagnosis.detail
        ))),
        DiagnosisKind::BadParams => match attempt_repair(profile, raw, diagnosis) {
            Ok(parsed) => Ok(Resolution::Repaired(parsed.action, diagnosis.clone())),
            Err(_) => Ok(Resolution::InjectError(format!(
                "Error: invalid parameters ({}). Check the tool signature and try again.",
                diagnosis.detail
            ))),
        },
        DiagnosisKind::MisplacedSpecialToken | DiagnosisKind::NoAction => {
            match attempt_repair(profile, raw, diagnosis) {
                Ok(parsed) => Ok(Resolution::Repaired(parsed.action, diagnosis.clone())),
                Err(_) if attempt < caps.retry_cap => Ok(Resolution::RetrySameStep),
                Err(_) => Ok(Resolution::InjectError(format!(
                    "Syntax error: {}. Reply with exactly one action: {}",
                    diagnosis.detail,
                    profile.tool_grammar.format_hint()
                ))),
            }
        }
    }
}

/// Per-step bookkeeping that comes from the runner, not from the action.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepMeta {
    pub logprob: Option<f64>,
    pub retries: usize,
    pub repaired_from: Option<ParseDiagnosis>,
}

#[derive(Debug, Clone, PartialEq)]
enum Pending {
    Tool,
    Fault,
}

/// A trajectory and its memory, owned by one worker.
#[derive(Debug, Clone)]
pub struct Episode {
    pub trajectory: Trajectory,
    pub memory: MemoryBuffer,
    ctx: RunContext,
    overhead: usize,
    pending: Option<Pending>,
}

impl Episode {
    pub fn new(question: Question, ctx: RunContext) -> Self {
        let counter = ctx.counter.as_ref();
        let question_tokens = counter.count(&question.text) + super::ENTRY_FRAME_TOKENS;
        let overhead = fixed_overhead(&ctx.system_prompt, counter);
        Self {
            trajectory: Trajectory::new(question),
            memory: MemoryBuffer::new(ctx.context, question_tokens),
            ctx,
            overhead,
            pending: None,
        }
    }

    pub fn context(&self) -> &RunContext {
        &self.ctx
    }

    pub fn is_terminated(&self) -> bool {
        self.trajectory.is_terminated()
    }

    pub fn len(&self) -> usize {
        self.trajectory.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectory.is_empty()
    }

    pub fn render(&self) -> Result<Prompt, RenderError> {
        let p = &self.ctx.profile;
        render_prompt(
            &self.trajectory,
            &self.memory,
            p.render_mode,
            &self.ctx.system_prompt,
            p.delimiters(),
            self.ctx.counter.as_ref(),
        )
    }

    /// Malformed responses since the last well-formed action, counting the
    /// discarded retries of each trailing malformed step.
    pub fn malformed_attempts(&self) -> usize {
        self.trajectory
            .steps
            .iter()
            .rev()
            .take_while(|s| s.action.is_malformed())
            .map(|s| 1 + s.retries)
            .sum()
    }

    pub fn terminate(&mut self, termination: Termination) {
        if self.trajectory.termination.is_none() {
            self.trajectory.termination = Some(termination);
        }
        self.pending = None;
    }

    fn counter(&self) -> &dyn TokenCounter {
        self.ctx.counter.as_ref()
    }

    fn last_step_mut(&mut self) -> &mut Step {
        self.trajectory.steps.last_mut().expect("a step was appended")
    }

    /// Appends the step for `action` and says what must happen next.
    pub fn apply_action(&mut self, response: String, action: AgentAction, meta: StepMeta) -> NextDirective {
        if let Some(t) = self.trajectory.termination {
            return NextDirective::Done(t);
        }
        self.memory.clear_transient();
        self.pending = None;
        let index = self.trajectory.len() + 1;
        let step = Step {
            index,
            response_token_count: self.counter().count(&response),
            model_response: response,
            action: action.clone(),
            tool_result: None,
            logprob: meta.logprob,
            retries: meta.retries,
            repaired_from: meta.repaired_from,
        };
        self.trajectory.steps.push(step);

        if let AgentAction::FinalAnswer { text } = &action {
            self.trajectory.final_answer = Some(text.clone());
            self.terminate(Termination::Answered);
            return NextDirective::Done(Termination::Answered);
        }
        if self.memory.overflow_gate(&action).is_err() {
            self.last_step_mut().tool_result = Some(ToolResult::Error { message: MEMORY_OVERFLOW.to_string() });
            return NextDirective::Continue;
        }
        match action {
            AgentAction::Malformed { raw, diagnosis } => {
                self.pending = Some(Pending::Fault);
                NextDirective::FaultProtocol { raw, diagnosis }
            }
            AgentAction::CleanMemory { content } => {
                let counter = self.ctx.counter.clone();
                let result = match self.memory.apply_cleanup(&content, index, counter.as_ref()) {
                    Ok(()) => ToolResult::Notice {
                        message: format!("memory replaced by your summary (cleanup #{})", self.memory.cleanup_count()),
                    },
                    Err(e) => {
                        let message = format!("clean_memory failed: {e}");
                        self.observe_error(index, &message);
                        ToolResult::Error { message }
                    }
                };
                self.last_step_mut().tool_result = Some(result);
                NextDirective::Continue
            }
            AgentAction::ToolCall { name, args } if name == EDIT_MEMORY || name == DELETE_MEMORY => {
                let result = self.edit_memory(&name, &args, index);
                self.last_step_mut().tool_result = Some(result);
                NextDirective::Continue
            }
            AgentAction::ToolCall { name, args } => {
                self.pending = Some(Pending::Tool);
                NextDirective::ExecuteTool { name, args }
            }
            AgentAction::FinalAnswer { .. } => unreachable!("handled above"),
        }
    }

    fn edit_memory(&mut self, name: &str, args: &ToolArgs, step: usize) -> ToolResult {
        let index = args.get("index").and_then(|v| v.as_u64()).map(|i| i as usize);
        let replacement = if name == EDIT_MEMORY { args.get("content").and_then(|v| v.as_str()) } else { None };
        let outcome = match index {
            None => Err("missing integer argument `index`".to_string()),
            Some(_) if name == EDIT_MEMORY && replacement.is_none() => Err("missing string argument `content`".to_string()),
            Some(i) => {
                let counter = self.ctx.counter.clone();
                self.memory
                    .edit_or_delete_entry(i, replacement, step, counter.as_ref())
                    .map_err(|e| e.to_string())
            }
        };
        match outcome {
            Ok(()) => ToolResult::Notice {
                message: if name == EDIT_MEMORY { "memory entry edited".into() } else { "memory entry deleted".into() },
            },
            Err(e) => {
                let message = format!("{name} failed: {e}");
                self.observe_error(step, &message);
                ToolResult::Error { message }
            }
        }
    }

    /// Shows an error to the agent without letting the prompt outgrow `L`:
    /// as a memory record when there is room, as a one-shot notice otherwise.
    fn observe_error(&mut self, step: usize, message: &str) {
        if self.memory.is_overflowing() {
            let text = clip_to_tokens(message, super::render::TRANSIENT_TOKENS, self.counter());
            self.memory.set_transient(text);
        } else {
            let space = self.memory.space_left(self.overhead);
            self.append_clipped(EntryKind::ToolResultRecord, message, step, space);
        }
    }

    fn append_clipped(&mut self, kind: EntryKind, text: &str, step: usize, max_tokens: usize) {
        if max_tokens <= super::ENTRY_FRAME_TOKENS {
            log::warn!("no room left in the context for a step {step} record; dropping it");
            return;
        }
        let room = max_tokens - super::ENTRY_FRAME_TOKENS;
        let text = clip_to_tokens(text, room, self.counter());
        let entry = MemoryEntry::new(kind, text, step, self.counter());
        self.memory.append(entry);
    }

    /// Records the observation for a pending `ExecuteTool` directive and
    /// packs the call and its result into memory.
    pub fn record_tool_result(&mut self, result: ToolResult) {
        if self.pending.take() != Some(Pending::Tool) {
            return;
        }
        let step = self.trajectory.len();
        let action = self.last_step_mut().action.clone();
        let call = serialize_action(&self.ctx.profile, &action);
        let observation = result.observation();
        let space = self.memory.space_left(self.overhead);
        self.append_clipped(EntryKind::ToolCallRecord, &call, step, space / 2);
        let space = self.memory.space_left(self.overhead);
        self.append_clipped(EntryKind::ToolResultRecord, &observation, step, space);
        self.last_step_mut().tool_result = Some(result);
    }

    /// Records the fault-protocol message for a pending `FaultProtocol`
    /// directive. The malformed text itself never enters memory.
    pub fn inject_error(&mut self, message: impl Into<String>) {
        if self.pending.take() != Some(Pending::Fault) {
            return;
        }
        let message = message.into();
        let step = self.trajectory.len();
        self.observe_error(step, &message);
        self.last_step_mut().tool_result = Some(ToolResult::Error { message });
    }
}

/// Longest prefix of `text` (plus a truncation mark) within `max_tokens`.
fn clip_to_tokens(text: &str, max_tokens: usize, counter: &dyn TokenCounter) -> String {
    if counter.count(text) <= max_tokens {
        return text.to_string();
    }
    if counter.count(CLIP_MARK) > max_tokens {
        return String::new();
    }
    let bounds: Vec<usize> = text.char_indices().map(|(i, _)| i).chain([text.len()]).collect();
    let fits = |n: usize| counter.count(&text[..bounds[n]]) + counter.count(CLIP_MARK) <= max_tokens;
    let (mut lo, mut hi) = (0, bounds.len() - 1);
    while lo < hi {
        let mid = (lo + hi).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    format!("{}{CLIP_MARK}", &text[..bounds[lo]])
}

/// Runs `q` from scratch until it terminates.
pub fn run_episode(q: Question, policy: &mut dyn Policy, tools: &dyn ToolExecutor, ctx: &RunContext) -> Trajectory {
    let mut episode = Episode::new(q, ctx.clone());
    run_from(&mut episode, policy, tools);
    episode.trajectory
}

/// Continues `episode` until it terminates.
pub fn run_from(episode: &mut Episode, policy: &mut dyn Policy, tools: &dyn ToolExecutor) {
    let profile = episode.ctx.profile.clone();
    let caps = episode.ctx.caps;
    let started = Instant::now();
    while !episode.is_terminated() {
        let out_of_time = episode.ctx.budget.wall_clock.is_some_and(|cap| started.elapsed() >= cap);
        if episode.len() >= episode.ctx.budget.max_steps || out_of_time {
            episode.terminate(Termination::StepBudgetExceeded);
            break;
        }
        let prompt = match episode.render() {
            Ok(p) => p,
            Err(_) => {
                episode.terminate(Termination::ContextTruncated);
                break;
            }
        };
        let mut retries = 0;
        let (completion, action, repaired_from, fault) = loop {
            let completion = match policy.complete(&prompt) {
                Ok(c) => c,
                Err(PolicyError::ContextLengthExceeded(_)) => {
                    episode.terminate(Termination::ContextTruncated);
                    return;
                }
                Err(e) => {
                    log::warn!("policy failed: {e}");
                    episode.terminate(Termination::ToolFatal);
                    return;
                }
            };
            let parsed = parse_action(&profile, &completion.text);
            let AgentAction::Malformed { raw, diagnosis } = &parsed.action else {
                break (completion, parsed.action, None, None);
            };
            let attempt = episode.malformed_attempts() + retries;
            match fault_protocol(&profile, raw, diagnosis, attempt, caps) {
                Ok(Resolution::RetrySameStep) => retries += 1,
                Ok(Resolution::Repaired(action, from)) => break (completion, action, Some(from), None),
                Ok(Resolution::InjectError(msg)) => break (completion, parsed.action, None, Some((msg, false))),
                Err(e) => break (completion, parsed.action, None, Some((e.to_string(), true))),
            }
        };
        let meta = StepMeta { logprob: completion.logprob, retries, repaired_from };
        match episode.apply_action(completion.text, action, meta) {
            NextDirective::ExecuteTool { name, args } => match tools.execute(&name, &args) {
                Ok(result) => episode.record_tool_result(result),
                Err(fatal) => {
                    episode.record_tool_result(ToolResult::Error { message: fatal.to_string() });
                    episode.terminate(Termination::ToolFatal);
                }
            },
            NextDirective::FaultProtocol { .. } => {
                let (msg, fatal) = fault.unwrap_or_else(|| ("Syntax error: malformed response".into(), false));
                episode.inject_error(msg);
                if fatal {
                    episode.terminate(Termination::FormatFailure);
                }
            }
            NextDirective::Continue => {
                if matches!(fault, Some((_, true))) {
                    episode.terminate(Termination::FormatFailure);
                }
            }
            NextDirective::Done(_) => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ReplayError {
    #[error("step {0} executed a tool but has no recorded result")]
    MissingToolResult(usize),
    #[error("step {0} went through the fault protocol but has no recorded error")]
    MissingFaultMessage(usize),
    #[error("prefix length {prefix} exceeds trajectory length {len}")]
    PrefixTooLong { prefix: usize, len: usize },
    #[error("prompt for step {0} cannot be rendered: {1}")]
    Render(usize, String),
}

fn replay_step(episode: &mut Episode, step: &Step) -> Result<(), ReplayError> {
    let meta = StepMeta { logprob: step.logprob, retries: step.retries, repaired_from: step.repaired_from.clone() };
    match episode.apply_action(step.model_response.clone(), step.action.clone(), meta) {
        NextDirective::ExecuteTool { .. } => {
            let result = step.tool_result.clone().ok_or(ReplayError::MissingToolResult(step.index))?;
            episode.record_tool_result(result);
        }
        NextDirective::FaultProtocol { .. } => match &step.tool_result {
            Some(ToolResult::Error { message }) => episode.inject_error(message.clone()),
            _ => return Err(ReplayError::MissingFaultMessage(step.index)),
        },
        NextDirective::Continue | NextDirective::Done(_) => {}
    }
    Ok(())
}

/// Rebuilds the episode state after the first `prefix` recorded steps by
/// feeding their actions and tool results back through the state machine.
/// With `prefix == T` the termination and reward are restored as well.
pub fn replay(recorded: &Trajectory, prefix: usize, ctx: &RunContext) -> Result<Episode, ReplayError> {
    if prefix > recorded.len() {
        return Err(ReplayError::PrefixTooLong { prefix, len: recorded.len() });
    }
    let mut episode = Episode::new(recorded.question.clone(), ctx.clone());
    for step in &recorded.steps[..prefix] {
        replay_step(&mut episode, step)?;
    }
    if prefix == recorded.len() {
        if let Some(t) = recorded.termination {
            episode.terminate(t);
        }
        episode.trajectory.reward = recorded.reward;
    }
    Ok(episode)
}

/// The prompt the policy saw before each recorded step, in order.
pub fn replay_prompts(recorded: &Trajectory, ctx: &RunContext) -> Result<Vec<Prompt>, ReplayError> {
    let mut episode = Episode::new(recorded.question.clone(), ctx.clone());
    let mut prompts = Vec::with_capacity(recorded.len());
    for step in &recorded.steps {
        prompts.push(episode.render().map_err(|e| ReplayError::Render(step.index, e.to_string()))?);
        replay_step(&mut episode, step)?;
    }
    Ok(prompts)
}
