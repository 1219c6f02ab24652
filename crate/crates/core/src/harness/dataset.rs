use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::{Gold, Question, TaskKind};
use crate::reward::RubricSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    ShortForm,
    LongForm,
}

/// One dataset line: `{id, question, answer}` or `{id, question, rubric}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetRecord {
    pub id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rubric: Option<RubricSpec>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalTask {
    pub path: PathBuf,
    pub questions: Vec<Question>,
    pub scoring: Scoring,
}

impl EvalTask {
    pub fn from_questions(path: impl Into<PathBuf>, questions: Vec<Question>) -> Result<Self, HarnessError> {
        let path = path.into();
        let scoring = match questions.first().map(|q| q.task_kind) {
            Some(TaskKind::LongFormReport) => Scoring::LongForm,
            _ => Scoring::ShortForm,
        };
        let expected = match scoring {
            Scoring::ShortForm => TaskKind::ShortFormQa,
            Scoring::LongForm => TaskKind::LongFormReport,
        };
        if let Some(q) = questions.iter().find(|q| q.task_kind != expected) {
            return Err(HarnessError::Dataset {
                path: path.display().to_string(),
                line: 0,
                reason: format!("question {:?} mixes short-form and long-form tasks", q.id),
            });
        }
        let mut seen = std::collections::BTreeSet::new();
        if let Some(q) = questions.iter().find(|q| !seen.insert(q.id.as_str())) {
            return Err(HarnessError::Dataset {
                path: path.display().to_string(),
                line: 0,
                reason: format!("duplicate question id {:?}", q.id),
            });
        }
        Ok(Self { path, questions, scoring })
    }

    /// Parses a line-delimited dataset; blank lines are skipped.
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("dataset {}: {e}", path.display())))?;
        let bad = |line: usize, reason: String| HarnessError::Dataset { path: path.display().to_string(), line, reason };
        let mut questions = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec: DatasetRecord = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
            let (kind, gold) = match (rec.answer, rec.rubric) {
                (Some(a), None) => (TaskKind::ShortFormQa, Gold::Answer(a)),
                (None, Some(r)) => {
                    r.weights.validate().map_err(|e| bad(i + 1, e.to_string()))?;
                    (TaskKind::LongFormReport, Gold::Rubric(r))
                }
                _ => return Err(bad(i + 1, "exactly one of `answer` or `rubric` is required".into())),
            };
            questions.push(Question::new(rec.id, rec.question, kind, Some(gold)).map_err(|e| bad(i + 1, e.to_string()))?);
        }
        Self::from_questions(path, questions)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    #[test]
    fn parses_both_kinds_and_names_bad_lines() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"a","question":"Capital of France?","answer":"Paris"}}"#).unwrap();
        writeln!(f).unwrap();
        writeln!(f, r#"{{"id":"b","question":"Why?","answer":"Because"}}"#).unwrap();
        let task = EvalTask::load(f.path()).unwrap();
        assert_eq!(task.questions.len(), 2);
        assert_eq!(task.scoring, Scoring::ShortForm);

        writeln!(f, r#"{{"id":"c","question":"x"}}"#).unwrap();
        match EvalTask::load(f.path()) {
            Err(HarnessError::Dataset { line, .. }) => assert_eq!(line, 4),
            other => panic!("expected dataset error, got {other:?}"),
        }
    }

    #[test]
    fn rubric_records_are_long_form() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        writeln!(f, r#"{{"id":"r","question":"Write a report","rubric":{{"instructions":{{"factuality":"no made-up facts"}}}}}}"#).unwrap();
        let task = EvalTask::load(f.path()).unwrap();
        assert_eq!(task.scoring, Scoring::LongForm);
    }
}
