use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{
    compute_advantages, filter_trajectories, ExportableRollout, FilterPolicy, FilterStats,
    RolloutGroup, RlError,
};
use super::loss::LossTerm;

/// What a rollout exposes about one of its steps for export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepPayload {
    pub state: String,
    pub action: String,
    pub old_logprob: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchRecord {
    pub group_id: String,
    /// Index within the group before filtering.
    pub trajectory_index: usize,
    pub step_index: usize,
    pub state: String,
    pub action: String,
    pub old_logprob: Option<f64>,
    pub advantage: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RewardStats {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
}

impl RewardStats {
    pub fn from_rewards(rewards: &[f64]) -> Self {
        if rewards.is_empty() {
            return Self::default();
        }
        let n = rewards.len() as f64;
        let mean = rewards.iter().sum::<f64>() / n;
        let std = (rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
        Self { count: rewards.len(), mean, std }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupStatus {
    Ok,
    /// Nothing survived filtering.
    Empty,
    /// A single trajectory survived; no advantage can be formed.
    Degenerate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub group_id: String,
    pub status: GroupStatus,
    pub filter: FilterStats,
    pub rewards: RewardStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchMetadata {
    /// Largest input group size.
    pub group_size: usize,
    pub groups: Vec<GroupSummary>,
    /// Statistics over retained trajectories only.
    pub rewards: RewardStats,
    pub records: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingBatch {
    pub records: Vec<BatchRecord>,
    pub metadata: BatchMetadata,
}


/// Filter every group, compute advantages over the survivors and flatten
/// them into step records. Groups that filter to nothing (or to a single
/// trajectory) contribute no records but appear in the metadata.
pub fn assemble_batch<R: ExportableRollout>(
    groups: Vec<RolloutGroup<R>>,
    filter: &FilterPolicy,
    eps: f64,
    rng_seed: u64,
) -> Result<TrainingBatch, RlError> {
    let group_size = groups.iter().map(RolloutGroup::len).max().unwrap_or(0);
    let mut records = Vec::new();
    let mut summaries = Vec::new();
    let mut retained_rewards = Vec::new();

    for (gi, group) in groups.into_iter().enumerate() {
        let group_id = group.seed_id.clone();
        let input = group.len();
        let seed = rng_seed ^ (gi as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        let outcome = match filter_trajectories(group, filter, seed) {
            Ok(o) => o,
            Err(RlError::EmptyAfterFilter) => {
                summaries.push(GroupSummary {
                    group_id,
                    status: GroupStatus::Empty,
                    filter: FilterStats { input, invalid_dropped: input, ..Default::default() },
                    rewards: RewardStats::default(),
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        let rewards = outcome.group.rewards()?;
        retained_rewards.extend_from_slice(&rewards);
        let reward_stats = RewardStats::from_rewards(&rewards);

        let advantages = match compute_advantages(&outcome.group, eps) {
            Ok(a) => a,
            Err(RlError::DegenerateGroup(_)) => {
                summaries.push(GroupSummary {
                    group_id,
                    status: GroupStatus::Degenerate,
                    filter: outcome.stats,
                    rewards: reward_stats,
                });
                continue;
            }
            Err(e) => return Err(e),
        };
        for adv in advantages {
            let payload = outcome.group.trajectories[adv.trajectory_index].step_payload(adv.step_index);
            records.push(BatchRecord {
                group_id: group_id.clone(),
                trajectory_index: outcome.kept[adv.trajectory_index],
                step_index: adv.step_index,
                state: payload.state,
                action: payload.action,
                old_logprob: payload.old_logprob,
                advantage: adv.advantage,
            });
        }
        summaries.push(GroupSummary {
            group_id,
            status: GroupStatus::Ok,
            filter: outcome.stats,
            rewards: reward_stats,
        });
    }

    let metadata = BatchMetadata {
        group_size,
        groups: summaries,
        rewards: RewardStats::from_rewards(&retained_rewards),
        records: records.len(),
    };
    Ok(TrainingBatch { records, metadata })
}

impl TrainingBatch {
    pub fn loss_terms(&self) -> Vec<LossTerm> {
        self.records
            .iter()
            .map(|r| LossTerm { advantage: r.advantage, old_logprob: r.old_logprob })
            .collect()
    }

    /// `{root}/{run_id}/{iteration}`
    pub fn export_dir(root: &Path, run_id: &str, iteration: usize) -> PathBuf {
        root.join(run_id).join(iteration.to_string())
    }

    /// Writes `batch.jsonl` (one record per line) and `meta.json` into `dir`.
    pub fn write_to(&self, dir: &Path) -> io::Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join("batch.jsonl");
        let mut out = BufWriter::new(fs::File::create(&path)?);
        for record in &self.records {
            serde_json::to_writer(&mut out, record)?;
            out.write_all(b"\n")?;
        }
        out.flush()?;
        fs::write(dir.join("meta.json"), serde_json::to_vec_pretty(&self.metadata)?)?;
        Ok(path)
    }

    pub fn read_records(path: &Path) -> io::Result<Vec<BatchRecord>> {
        let text = fs::read_to_string(path)?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(io::Error::other))
            .collect()
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::rl::ScoredRollout;

    #[test]
    fn two_trajectories_yield_three_records() {
        let g = RolloutGroup::new("q1", vec![ScoredRollout::new(1.0, 1), ScoredRollout::new(0.0, 2)]);
        let batch = assemble_batch(vec![g], &FilterPolicy::default(), 1e-6, 0).unwrap();
        assert_eq!(batch.records.len(), 3);
        assert_eq!(batch.metadata.records, 3);
        assert_eq!(batch.metadata.group_size, 2);
    }

    #[test]
    fn metadata_mean_uses_retained_only() {
        let g = RolloutGroup::new(
            "q",
            vec![
                ScoredRollout::new(1.0, 2),
                ScoredRollout::new(0.0, 2),
                ScoredRollout::new(0.0, 3),
                ScoredRollout::invalid(1.0, 12),
            ],
        );
        let batch = assemble_batch(vec![g], &FilterPolicy::default(), 1e-6, 3).unwrap();
        assert!((batch.metadata.rewards.mean - 1.0 / 3.0).abs() < 1e-12);
        assert!(batch.records.iter().all(|r| r.trajectory_index != 3));
    }

    #[test]
    fn all_invalid_group_is_an_empty_entry() {
        let g = RolloutGroup::new("q", vec![ScoredRollout::invalid(0.0, 4), ScoredRollout::invalid(1.0, 4)]);
        let batch = assemble_batch(vec![g], &FilterPolicy::default(), 1e-6, 0).unwrap();
        assert!(batch.records.is_empty());
        assert_eq!(batch.metadata.groups[0].status, GroupStatus::Empty);
        assert_eq!(batch.metadata.groups[0].filter.invalid_dropped, 2);
    }
}
