use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::Trajectory;

/// Note attached to stats computed from no trajectories.
pub const EMPTY_NOTE: &str = "no trajectories: averages are reported as 0 instead of dividing by zero";

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    pub trajectories: usize,
    /// Mean calls per trajectory, by tool name.
    pub avg_tool_calls: BTreeMap<String, f64>,
    /// Response tokens averaged over every step of every trajectory.
    pub avg_step_response_tokens: f64,
    /// Trajectory length `T` to number of trajectories.
    pub length_histogram: BTreeMap<usize, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl BehaviorStats {
    pub fn from_trajectories<'a>(trajs: impl IntoIterator<Item = &'a Trajectory>) -> Self {
        let mut stats = Self::default();
        let mut calls: BTreeMap<String, usize> = BTreeMap::new();
        let (mut steps, mut tokens) = (0usize, 0usize);
        for t in trajs {
            stats.trajectories += 1;
            for (name, n) in t.tool_call_counts() {
                *calls.entry(name).or_insert(0) += n;
            }
            steps += t.len();
            tokens += t.total_response_tokens();
            *stats.length_histogram.entry(t.len()).or_insert(0) += 1;
        }
        if stats.trajectories == 0 {
            stats.note = Some(EMPTY_NOTE.to_string());
            return stats;
        }
        let n = stats.trajectories as f64;
        stats.avg_tool_calls = calls.into_iter().map(|(k, v)| (k, v as f64 / n)).collect();
        stats.avg_step_response_tokens = if steps == 0 { 0.0 } else { tokens as f64 / steps as f64 };
        stats
    }
}

/// Reads trajectory files (one JSON trajectory per non-blank line) and
/// summarizes them. Parse errors name the file and line.
pub fn compute_stats<P: AsRef<Path>>(files: &[P]) -> Result<BehaviorStats, HarnessError> {
    let mut trajs = Vec::new();
    for file in files {
        let path = file.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let t: Trajectory = serde_json::from_str(line).map_err(|e| HarnessError::Dataset {
                path: path.display().to_string(),
                line: i + 1,
                reason: e.to_string(),
            })?;
            trajs.push(t);
        }
    }
    Ok(BehaviorStats::from_trajectories(&trajs))
}
