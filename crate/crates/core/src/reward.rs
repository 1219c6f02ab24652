//! Rewards: judged short-form consistency with an exact-match fallback,
//! and rubric scoring plus group ranking for long-form reports.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{strip_thinking, ChatMessage, Role};
use crate::policy::ChatClient;

/// Default weight of the ranking score in the long-form reward.
pub const DEFAULT_MIX: f64 = 0.25;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum JudgeError {
    #[error("judge unavailable: {0}")]
    Unavailable(String),
}

/// A model that answers grading prompts.
pub trait Judge: Send + Sync {
    fn judge(&self, prompt: &str) -> Result<String, JudgeError>;
}

/// Judge backed by a closure, for tests and offline graders.
pub struct FnJudge<F>(pub F);

impl<F> Judge for FnJudge<F>
where
    F: Fn(&str) -> Result<String, JudgeError> + Send + Sync,
{
    fn judge(&self, prompt: &str) -> Result<String, JudgeError> {
        (self.0)(prompt)
    }
}

impl Judge for ChatClient {
    fn judge(&self, prompt: &str) -> Result<String, JudgeError> {
        let reply = self
            .chat(&[ChatMessage::new(Role::User, prompt)])
            .map_err(|e| JudgeError::Unavailable(e.to_string()))?;
        Ok(strip_thinking(&reply.text, self.profile().delimiters()).trim().to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeMethod {
    LlmJudge,
    ExactMatchFallback,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShortFormVerdict {
    pub consistent: bool,
    pub judge_raw: String,
    pub method: JudgeMethod,
    /// Set when a judge was configured but could not be reached.
    pub judge_unavailable: bool,
}

impl ShortFormVerdict {
    pub fn reward(&self) -> f64 {
        if self.consistent {
            1.0
        } else {
            0.0
        }
    }
}

/// Casefolds, turns punctuation into spaces, drops English articles and
/// collapses whitespace.
pub fn normalize_answer(s: &str) -> Vec<String> {
    let cleaned: String = s
        .to_lowercase()
        .chars()
        .map(|c| if c.is_alphanumeric() || c.is_whitespace() { c } else { ' ' })
        .collect();
    cleaned
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .map(str::to_string)
        .collect()
}

/// Normalized match: equal token sequences, or the gold tokens appear as a
/// contiguous run inside the answer ("paris france" contains "paris").
pub fn exact_match(answer: &str, gold: &str) -> bool {
    let (a, g) = (normalize_answer(answer), normalize_answer(gold));
    !g.is_empty() && (a == g || a.windows(g.len()).any(|w| w == g.as_slice()))
}

fn parse_yes_no(raw: &str) -> Option<bool> {
    let words: Vec<String> = raw
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect();
    let first = words.first().map(String::as_str);
    let last = words.last().map(String::as_str);
    for w in [first, last].into_iter().flatten() {
        match w {
            "yes" | "consistent" | "correct" => return Some(true),
            "no" | "inconsistent" | "incorrect" => return Some(false),
            _ => {}
        }
    }
    None
}

fn short_form_prompt(question: &str, answer: &str, gold: &str) -> String {
    format!(
        "Decide whether the response is semantically consistent with the ground-truth answer.\n\
         Question: {question}\nGround truth: {gold}\nResponse: {answer}\n\
         Reply with a single word: yes or no."
    )
}

/// Asks the judge for a yes/no verdict, falling back to normalized exact
/// match when there is no judge, it is unreachable, or its reply has no
/// verdict.
pub fn judge_short_form(question: &str, answer: &str, gold: &str, judge: Option<&dyn Judge>) -> ShortFormVerdict {
    let fallback = |raw: String, unavailable: bool| ShortFormVerdict {
        consistent: exact_match(answer, gold),
        judge_raw: raw,
        method: JudgeMethod::ExactMatchFallback,
        judge_unavailable: unavailable,
    };
    let Some(judge) = judge else { return fallback(String::new(), false) };
    match judge.judge(&short_form_prompt(question, answer, gold)) {
        Ok(raw) => match parse_yes_no(&raw) {
            Some(consistent) => ShortFormVerdict {
                consistent,
                judge_raw: raw,
                method: JudgeMethod::LlmJudge,
                judge_unavailable: false,
            },
            None => fallback(raw, false),
        },
        Err(e) => {
            log::warn!("short-form judge failed, using exact match: {e}");
            fallback(e.to_string(), true)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    Factuality,
    Compliance,
    WritingQuality,
    CitationQuality,
}

impl Criterion {
    pub const ALL: [Criterion; 4] =
        [Criterion::Factuality, Criterion::Compliance, Criterion::WritingQuality, Criterion::CitationQuality];

    pub fn label(self) -> &'static str {
        match self {
            Criterion::Factuality => "factuality (no hallucinated claims)",
            Criterion::Compliance => "compliance with the task instructions",
            Criterion::WritingQuality => "writing quality",
            Criterion::CitationQuality => "citation quality",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RubricError {
    #[error("rubric weights must be non-negative and sum to 1, got {0:?}")]
    BadWeights(BTreeMap<Criterion, f64>),
    #[error("cannot read rubric {path}: {reason}")]
    Load { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RubricWeights(pub BTreeMap<Criterion, f64>);

impl Default for RubricWeights {
    fn default() -> Self {
        Self(Criterion::ALL.into_iter().zip([0.4, 0.2, 0.2, 0.2]).collect())
    }
}

impl RubricWeights {
    pub fn get(&self, c: Criterion) -> f64 {
        self.0.get(&c).copied().unwrap_or(0.0)
    }

    pub fn validate(&self) -> Result<(), RubricError> {
        let sum: f64 = Criterion::ALL.iter().map(|c| self.get(*c)).sum();
        if self.0.values().any(|w| *w < 0.0 || !w.is_finite()) || (sum - 1.0).abs() > 1e-9 {
            return Err(RubricError::BadWeights(self.0.clone()));
        }
        Ok(())
    }
}

/// Per-criterion grading instructions and weights for a long-form task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricSpec {
    #[serde(default)]
    pub instructions: BTreeMap<Criterion, String>,
    #[serde(default)]
    pub weights: RubricWeights,
}

impl Default for RubricSpec {
    fn default() -> Self {
        Self { instructions: BTreeMap::new(), weights: RubricWeights::default() }
    }
}

impl RubricSpec {
    pub fn load(path: &Path) -> Result<Self, RubricError> {
        let load_err = |reason: String| RubricError::Load { path: path.display().to_string(), reason };
        let text = std::fs::read_to_string(path).map_err(|e| load_err(e.to_string()))?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| load_err(e.to_string()))?;
        spec.weights.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RubricScore {
    pub components: BTreeMap<Criterion, f64>,
    pub weights: RubricWeights,
    /// False for empty or truncated reports; they are excluded from ranking.
    pub valid: bool,
    pub judge_available: bool,
}

impl RubricScore {
    pub fn weighted(&self) -> f64 {
        Criterion::ALL.iter().map(|c| self.weights.get(*c) * self.components.get(c).copied().unwrap_or(0.0)).sum()
    }
}

static NUMBER: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"-?\d+(?:\.\d+)?").expect("static regex"));

fn rubric_prompt(criterion: Criterion, instruction: &str, report: &str) -> String {
    format!(
        "Grade the report on {}.\nInstructions: {}\n\nReport:\n{report}\n\n\
         Reply with a single score between 0 and 1.",
        criterion.label(),
        if instruction.is_empty() { "use your judgement" } else { instruction }
    )
}

/// One judged score per criterion, clamped to [0, 1]. Invalid reports and
/// unreachable judges score 0.
pub fn score_report(report: &str, rubric: &RubricSpec, judge: &dyn Judge) -> RubricScore {
    let zeros: BTreeMap<Criterion, f64> = Criterion::ALL.iter().map(|c| (*c, 0.0)).collect();
    let valid = !report.trim().is_empty();
    let mut score = RubricScore { components: zeros, weights: rubric.weights.clone(), valid, judge_available: true };
    if !valid {
        return score;
    }
    for c in Criterion::ALL {
        let instruction = rubric.instructions.get(&c).map(String::as_str).unwrap_or_default();
        let parsed = judge
            .judge(&rubric_prompt(c, instruction, report))
            .ok()
            .and_then(|raw| NUMBER.find(&raw).and_then(|m| m.as_str().parse::<f64>().ok()));
        match parsed {
            Some(v) => {
                score.components.insert(c, v.clamp(0.0, 1.0));
            }
            None => score.judge_available = false,
        }
    }
    score
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankingScore {
    /// 1-based competition rank among valid reports.
    pub rank: Option<usize>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingOutcome {
    pub scores: Vec<RankingScore>,
    pub judge_available: bool,
}

/// Maps ranks to scores: rank `k` of `n` valid reports scores
/// `(n - k) / (n - 1)`, a lone valid report scores 1, invalid ones 0.
pub fn scores_from_ranks(ranks: &[Option<usize>]) -> Vec<RankingScore> {
    let n = ranks.iter().flatten().count();
    ranks
        .iter()
        .map(|r| match r {
            None => RankingScore { rank: None, score: 0.0 },
            Some(_) if n <= 1 => RankingScore { rank: *r, score: 1.0 },
            Some(k) => RankingScore { rank: *r, score: (n.saturating_sub(*k)) as f64 / (n - 1) as f64 },
        })
        .collect()
}

fn pairwise_prompt(a: &str, b: &str) -> String {
    format!(
        "Compare two research reports written for the same task.\n\nReport A:\n{a}\n\nReport B:\n{b}\n\n\
         Which report is better overall? Reply with A, B, or TIE."
    )
}

/// Ranks valid reports by pairwise judge comparisons (win = 1, tie = 1/2)
/// with competition ranking. If the judge fails, every valid report gets
/// the same score 1 and the outcome is flagged.
pub fn rank_reports(reports: &[String], valid: &[bool], judge: &dyn Judge) -> RankingOutcome {
    let idx: Vec<usize> = (0..reports.len()).filter(|&i| valid.get(i).copied().unwrap_or(false)).collect();
    let mut wins = vec![0.0f64; reports.len()];
    for (p, &i) in idx.iter().enumerate() {
        for &j in &idx[p + 1..] {
            let reply = match judge.judge(&pairwise_prompt(&reports[i], &reports[j])) {
                Ok(r) => r.trim().to_uppercase(),
                Err(e) => {
                    log::warn!("ranking judge failed: {e}");
                    let scores = (0..reports.len())
                        .map(|k| match idx.contains(&k) {
                            true => RankingScore { rank: Some(1), score: 1.0 },
                            false => RankingScore { rank: None, score: 0.0 },
                        })
                        .collect();
                    return RankingOutcome { scores, judge_available: false };
                }
            };
            match reply.split_whitespace().next().map(|w| w.trim_matches(|c: char| !c.is_alphanumeric())) {
                Some("A") => wins[i] += 1.0,
                Some("B") => wins[j] += 1.0,
                _ => {
                    wins[i] += 0.5;
                    wins[j] += 0.5;
                }
            }
        }
    }
    let ranks: Vec<Option<usize>> = (0..reports.len())
        .map(|i| idx.contains(&i).then(|| 1 + idx.iter().filter(|&&k| wins[k] > wins[i]).count()))
        .collect();
    RankingOutcome { scores: scores_from_ranks(&ranks), judge_available: true }
}

/// `(1 - mix) * weighted components + mix * ranking score`, in [0, 1].
pub fn total_reward(rubric: &RubricScore, ranking: &RankingScore, mix: f64) -> f64 {
    let mix = mix.clamp(0.0, 1.0);
    ((1.0 - mix) * rubric.weighted() + mix * ranking.score).clamp(0.0, 1.0)
}
