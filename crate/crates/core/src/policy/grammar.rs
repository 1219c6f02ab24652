use serde_json::{json, Value};
use thiserror::Error;

use super::{ParamType, PolicyProfile, ToolGrammar, ToolRegistry};
use crate::agent::{strip_thinking, AgentAction, DiagnosisKind, ParseDiagnosis, ToolArgs};
use crate::memory::CLEAN_MEMORY;

pub const TOOL_OPEN: &str = "<tool_call>";
pub const TOOL_CLOSE: &str = "</tool_call>";
pub const ANSWER_OPEN: &str = "<answer>";
pub const ANSWER_CLOSE: &str = "</answer>";

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedAction {
    pub action: AgentAction,
    /// Set when the action is malformed or came out of a repair.
    pub diagnosis: Option<ParseDiagnosis>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("irreparable: {0}")]
pub struct Irreparable(pub String);

/// An action segment before it is checked against the registry.
enum RawAction {
    Call { name: String, args: Value },
    Answer(String),
}

fn diag(kind: DiagnosisKind, detail: impl Into<String>) -> ParseDiagnosis {
    ParseDiagnosis::new(kind, detail)
}

/// Classifies raw model text. Never panics; malformed input becomes
/// `AgentAction::Malformed` carrying the original text.
pub fn parse_action(profile: &PolicyProfile, raw: &str) -> ParsedAction {
    let body = strip_thinking(raw, profile.delimiters());
    let result = extract(profile.tool_grammar, &body).and_then(|r| classify(r, &profile.registry()));
    match result {
        Ok(action) => ParsedAction { action, diagnosis: None },
        Err(d) => ParsedAction {
            action: AgentAction::Malformed { raw: raw.to_string(), diagnosis: d.clone() },
            diagnosis: Some(d),
        },
    }
}

fn extract(grammar: ToolGrammar, body: &str) -> Result<RawAction, ParseDiagnosis> {
    match grammar {
        ToolGrammar::TaggedToolCall => extract_tagged(body),
        ToolGrammar::NativeFunctionCall => extract_native(body),
    }
}

fn extract_tagged(body: &str) -> Result<RawAction, ParseDiagnosis> {
    let has_tool = body.contains(TOOL_OPEN) || body.contains(TOOL_CLOSE);
    let has_answer = body.contains(ANSWER_OPEN) || body.contains(ANSWER_CLOSE);
    if has_tool && has_answer {
        return Err(diag(DiagnosisKind::NoAction, "response contains both a tool call and an answer"));
    }
    if !has_tool && !has_answer {
        return Err(diag(DiagnosisKind::NoAction, "no tool call or answer found"));
    }
    let (open, close) = if has_tool { (TOOL_OPEN, TOOL_CLOSE) } else { (ANSWER_OPEN, ANSWER_CLOSE) };
    let (opens, closes) = (body.matches(open).count(), body.matches(close).count());
    if opens != 1 || closes != 1 {
        return Err(diag(
            DiagnosisKind::MisplacedSpecialToken,
            format!("expected one {open} and one {close}, found {opens} and {closes}"),
        ));
    }
    let start = body.find(open).unwrap_or(0);
    let end = body.find(close).unwrap_or(0);
    if end < start {
        return Err(diag(DiagnosisKind::MisplacedSpecialToken, format!("{close} appears before {open}")));
    }
    if !body[end + close.len()..].trim().is_empty() {
        return Err(diag(DiagnosisKind::MisplacedSpecialToken, format!("text after {close}")));
    }
    let inner = &body[start + open.len()..end];
    if has_answer {
        return Ok(RawAction::Answer(inner.trim().to_string()));
    }
    let value: Value = serde_json::from_str(inner.trim())
        .map_err(|e| diag(DiagnosisKind::MisplacedSpecialToken, format!("tool call is not valid JSON ({e})")))?;
    call_from_object(&value)
}

fn call_from_object(value: &Value) -> Result<RawAction, ParseDiagnosis> {
    let Some(obj) = value.as_object() else {
        return Err(diag(DiagnosisKind::MisplacedSpecialToken, "tool call is not a JSON object"));
    };
    let Some(name) = obj.get("name").and_then(Value::as_str) else {
        return Err(diag(DiagnosisKind::MisplacedSpecialToken, "tool call has no \"name\""));
    };
    let args = obj.get("arguments").cloned().unwrap_or_else(|| json!({}));
    Ok(RawAction::Call { name: name.to_string(), args })
}

fn extract_native(body: &str) -> Result<RawAction, ParseDiagnosis> {
    let Some(start) = body.find('{') else {
        return Err(diag(DiagnosisKind::NoAction, "no tool call or answer found"));
    };
    let mut stream = serde_json::Deserializer::from_str(&body[start..]).into_iter::<Value>();
    let value = match stream.next() {
        Some(Ok(v)) => v,
        Some(Err(e)) => {
            return Err(diag(DiagnosisKind::MisplacedSpecialToken, format!("action is not valid JSON ({e})")))
        }
        None => return Err(diag(DiagnosisKind::NoAction, "no tool call or answer found")),
    };
    if !body[start + stream.byte_offset()..].trim().is_empty() {
        return Err(diag(DiagnosisKind::MisplacedSpecialToken, "text after the JSON action"));
    }
    let Some(obj) = value.as_object() else {
        return Err(diag(DiagnosisKind::MisplacedSpecialToken, "action is not a JSON object"));
    };
    match (obj.get("tool_call"), obj.get("answer")) {
        (Some(_), Some(_)) => {
            Err(diag(DiagnosisKind::NoAction, "response contains both a tool call and an answer"))
        }
        (Some(call), None) => call_from_object(call),
        (None, Some(Value::String(a))) => Ok(RawAction::Answer(a.trim().to_string())),
        (None, Some(_)) => Err(diag(DiagnosisKind::MisplacedSpecialToken, "answer must be a string")),
        (None, None) => Err(diag(DiagnosisKind::NoAction, "JSON has neither \"tool_call\" nor \"answer\"")),
    }
}

fn classify(raw: RawAction, registry: &ToolRegistry) -> Result<AgentAction, ParseDiagnosis> {
    let (name, args) = match raw {
        RawAction::Answer(text) if text.is_empty() => {
            return Err(diag(DiagnosisKind::NoAction, "empty answer"));
        }
        RawAction::Answer(text) => return Ok(AgentAction::FinalAnswer { text }),
        RawAction::Call { name, args } => (name, args),
    };
    let Some(spec) = registry.get(&name) else {
        return Err(diag(DiagnosisKind::UnknownTool, format!("`{name}` is not a registered tool")));
    };
    let Value::Object(args) = args else {
        return Err(diag(DiagnosisKind::BadParams, format!("{name}: arguments must be a JSON object")));
    };
    spec.validate(&args).map_err(|e| diag(DiagnosisKind::BadParams, e))?;
    if name == CLEAN_MEMORY {
        let content = args.get("content").and_then(Value::as_str).unwrap_or_default().to_string();
        return Ok(AgentAction::CleanMemory { content });
    }
    Ok(AgentAction::ToolCall { name, args })
}

/// Canonical text for `action` under the profile's grammar. Malformed
/// actions serialize to their raw text.
pub fn serialize_action(profile: &PolicyProfile, action: &AgentAction) -> String {
    let call = |name: &str, args: Value| json!({ "name": name, "arguments": args });
    match (profile.tool_grammar, action) {
        (_, AgentAction::Malformed { raw, .. }) => raw.clone(),
        (ToolGrammar::TaggedToolCall, AgentAction::FinalAnswer { text }) => format!("{ANSWER_OPEN}{text}{ANSWER_CLOSE}"),
        (ToolGrammar::TaggedToolCall, AgentAction::ToolCall { name, args }) => {
            format!("{TOOL_OPEN}{}{TOOL_CLOSE}", call(name, Value::Object(args.clone())))
        }
        (ToolGrammar::TaggedToolCall, AgentAction::CleanMemory { content }) => {
            format!("{TOOL_OPEN}{}{TOOL_CLOSE}", call(CLEAN_MEMORY, json!({ "content": content })))
        }
        (ToolGrammar::NativeFunctionCall, AgentAction::FinalAnswer { text }) => json!({ "answer": text }).to_string(),
        (ToolGrammar::NativeFunctionCall, AgentAction::ToolCall { name, args }) => {
            json!({ "tool_call": call(name, Value::Object(args.clone())) }).to_string()
        }
        (ToolGrammar::NativeFunctionCall, AgentAction::CleanMemory { content }) => {
            json!({ "tool_call": call(CLEAN_MEMORY, json!({ "content": content })) }).to_string()
        }
    }
}

/// Span of the first balanced JSON object in `s`, string-aware.
fn first_json_object(s: &str) -> Option<&str> {
    let start = s.find('{')?;
    let (mut depth, mut in_str, mut escaped) = (0usize, false, false);
    for (i, ch) in s[start..].char_indices() {
        if in_str {
            match ch {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_str = false,
                _ => {}
            }
            continue;
        }
        match ch {
            '"' => in_str = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&s[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Texts the deterministic repair set derives from a malformed body, most
/// conservative first.
fn candidates(grammar: ToolGrammar, body: &str) -> Vec<String> {
    let mut out = vec![body.to_string()];
    match grammar {
        ToolGrammar::TaggedToolCall => {
            let has_tool = body.contains(TOOL_OPEN) || body.contains(TOOL_CLOSE);
            let has_answer = body.contains(ANSWER_OPEN) || body.contains(ANSWER_CLOSE);
            for close in [TOOL_CLOSE, ANSWER_CLOSE] {
                if let Some(pos) = body.rfind(close) {
                    out.push(body[..pos + close.len()].to_string());
                }
            }
            if !has_answer {
                let stripped = body.replace(TOOL_OPEN, "").replace(TOOL_CLOSE, "");
                if let Some(obj) = first_json_object(&stripped) {
                    out.push(format!("{TOOL_OPEN}{obj}{TOOL_CLOSE}"));
                }
            }
            if has_answer && !has_tool {
                if let Some(pos) = body.find(ANSWER_OPEN) {
                    let text = body[pos + ANSWER_OPEN.len()..].replace(ANSWER_OPEN, "").replace(ANSWER_CLOSE, "");
                    out.push(format!("{ANSWER_OPEN}{}{ANSWER_CLOSE}", text.trim()));
                }
            }
        }
        ToolGrammar::NativeFunctionCall => {
            if let Some(obj) = first_json_object(body) {
                out.push(obj.to_string());
                if let Ok(Value::Object(map)) = serde_json::from_str::<Value>(obj) {
                    if map.contains_key("name") && !map.contains_key("tool_call") {
                        out.push(json!({ "tool_call": Value::Object(map) }).to_string());
                    }
                }
            }
        }
    }
    out
}

/// Turns numeric strings into integers for integer parameters.
fn coerce(profile: &PolicyProfile, text: &str) -> Option<AgentAction> {
    let registry = profile.registry();
    let RawAction::Call { name, args } = extract(profile.tool_grammar, text).ok()? else {
        return None;
    };
    let spec = registry.get(&name)?;
    let mut args: ToolArgs = args.as_object()?.clone();
    let mut changed = false;
    for (key, value) in args.iter_mut() {
        if spec.param(key) != Some(ParamType::Int) {
            continue;
        }
        if let Some(n) = value.as_str().and_then(|s| s.trim().parse::<u64>().ok()) {
            *value = json!(n);
            changed = true;
        }
    }
    if !changed {
        return None;
    }
    classify(RawAction::Call { name, args: Value::Object(args) }, &registry).ok()
}

/// A repair may only rearrange what the model wrote: the tool name and
/// every argument key must already appear in the raw text.
fn is_sound(action: &AgentAction, raw: &str) -> bool {
    match action {
        AgentAction::ToolCall { name, args } => raw.contains(name.as_str()) && args.keys().all(|k| raw.contains(k.as_str())),
        AgentAction::CleanMemory { content } => raw.contains(CLEAN_MEMORY) && raw.contains(content.as_str()),
        AgentAction::FinalAnswer { text } => raw.contains(text.as_str()),
        AgentAction::Malformed { .. } => false,
    }
}

/// Applies the deterministic repair set: trailing-text trimming, special
/// token rebalancing, and numeric-string coercion for integer parameters.
/// Unknown tools are never repaired.
pub fn attempt_repair(profile: &PolicyProfile, raw: &str, diagnosis: &ParseDiagnosis) -> Result<ParsedAction, Irreparable> {
    if diagnosis.kind == DiagnosisKind::UnknownTool {
        return Err(Irreparable("unknown tool names are not rewritten".into()));
    }
    let body = strip_thinking(raw, profile.delimiters());
    for candidate in candidates(profile.tool_grammar, &body) {
        let parsed = parse_action(profile, &candidate);
        let action = match parsed.action {
            AgentAction::Malformed { diagnosis: d, .. } if d.kind == DiagnosisKind::BadParams => {
                match coerce(profile, &candidate) {
                    Some(a) => a,
                    None => continue,
                }
            }
            AgentAction::Malformed { .. } => continue,
            a => a,
        };
        if is_sound(&action, &body) {
            return Ok(ParsedAction { action, diagnosis: Some(diagnosis.clone()) });
        }
    }
    Err(Irreparable(diagnosis.detail.clone()))
}
