use serde::{Deserialize, Serialize};

use super::{bump_advantage_calls, Rollout, RolloutGroup, RlError, DEFAULT_ADVANTAGE_EPS};

/// Step-level advantage of one trajectory in a group.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdvantageRecord {
    pub trajectory_index: usize,
    pub step_index: usize,
    pub advantage: f64,
    /// Trajectory length `T_i` used in the normalization.
    pub length: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdvantageOptions {
    pub eps: f64,
    /// Divide by the trajectory length. Off reproduces plain group
    /// normalization.
    pub length_normalization: bool,
}

impl Default for AdvantageOptions {
    fn default() -> Self {
        Self { eps: DEFAULT_ADVANTAGE_EPS, length_normalization: true }
    }
}

/// `A_i = (r_i - mean(R)) / ((std(R) + eps) * T_i)`, repeated for every
/// step of trajectory `i`. `std` is the population standard deviation.
pub fn compute_advantages<R: Rollout>(
    group: &RolloutGroup<R>,
    eps: f64,
) -> Result<Vec<AdvantageRecord>, RlError> {
    compute_advantages_with(group, AdvantageOptions { eps, length_normalization: true })
}

pub fn compute_advantages_with<R: Rollout>(
    group: &RolloutGroup<R>,
    opts: AdvantageOptions,
) -> Result<Vec<AdvantageRecord>, RlError> {
    bump_advantage_calls();
    if !(opts.eps > 0.0) {
        return Err(RlError::BadEpsilon(opts.eps));
    }
    if group.len() < 2 {
        return Err(RlError::DegenerateGroup(group.len()));
    }
    let rewards = group.rewards()?;
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    let constant = rewards.iter().all(|r| *r == rewards[0]);

    let mut out = Vec::new();
    for (i, (traj, reward)) in group.trajectories.iter().zip(&rewards).enumerate() {
        let len = traj.num_steps();
        let scale = if opts.length_normalization { len.max(1) as f64 } else { 1.0 };
        let advantage = if constant { 0.0 } else { (reward - mean) / ((std + opts.eps) * scale) };
        out.extend((0..len).map(|j| AdvantageRecord {
            trajectory_index: i,
            step_index: j,
            advantage,
            length: len,
        }));
    }
    Ok(out)
}
