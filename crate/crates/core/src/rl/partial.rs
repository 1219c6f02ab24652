use rand::seq::index::sample;
use rand::Rng;

use super::{ExportableRollout, RlError, Rollout, StepPayload};
use crate::agent::{replay, replay_prompts, AgentAction, Episode, ReplayError, RunContext, Trajectory};
use crate::toolbox::ToolResult;

/// Default number of seeds taken from one origin trajectory.
pub const MAX_SEEDS_PER_ORIGIN: usize = 2;

/// A frozen trajectory prefix, reused as a fresh initial state.
#[derive(Debug, Clone)]
pub struct PartialSeed {
    pub origin_id: String,
    pub prefix_len: usize,
    pub episode: Episode,
}

impl PartialSeed {
    pub fn seed_id(&self) -> String {
        format!("{}@{}", self.origin_id, self.prefix_len)
    }

    /// A copy of the frozen state to continue from step `prefix_len + 1`.
    pub fn start(&self) -> Episode {
        self.episode.clone()
    }
}

impl From<ReplayError> for RlError {
    fn from(e: ReplayError) -> Self {
        RlError::Replay(e.to_string())
    }
}

/// Freezes the state after each cut point `p` (`1 <= p < T`) by replaying
/// the origin's first `p` steps.
pub fn spawn_partial_seeds(traj: &Trajectory, cut_points: &[usize], ctx: &RunContext) -> Result<Vec<PartialSeed>, RlError> {
    let len = traj.len();
    if let Some(&cut) = cut_points.iter().find(|&&p| p == 0 || p >= len) {
        return Err(RlError::BadCutPoint { cut, len });
    }
    cut_points
        .iter()
        .map(|&p| {
            Ok(PartialSeed { origin_id: traj.question.id.clone(), prefix_len: p, episode: replay(traj, p, ctx)? })
        })
        .collect()
}

/// Prefix lengths that stop right after a tool error or a memory cleanup.
pub fn cut_candidates(traj: &Trajectory) -> Vec<usize> {
    traj.steps
        .iter()
        .filter(|s| s.index < traj.len())
        .filter(|s| {
            matches!(s.tool_result, Some(ToolResult::Error { .. }))
                || matches!(s.action, AgentAction::CleanMemory { .. })
        })
        .map(|s| s.index)
        .collect()
}

/// Up to `max` distinct candidates, drawn uniformly, in ascending order.
pub fn select_cut_points(traj: &Trajectory, max: usize, rng: &mut impl Rng) -> Vec<usize> {
    let candidates = cut_candidates(traj);
    let mut picked: Vec<usize> =
        sample(rng, candidates.len(), max.min(candidates.len())).into_iter().map(|i| candidates[i]).collect();
    picked.sort_unstable();
    picked
}

/// An agent trajectory ready for export. Steps before `skip` belong to a
/// partial seed's frozen prefix and are neither counted nor exported.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentRollout {
    pub trajectory: Trajectory,
    pub skip: usize,
    states: Vec<String>,
}

impl AgentRollout {
    pub fn new(trajectory: Trajectory, ctx: &RunContext) -> Result<Self, RlError> {
        Self::continued(trajectory, 0, ctx)
    }

    /// A rollout grown from a seed with prefix length `skip`.
    pub fn continued(trajectory: Trajectory, skip: usize, ctx: &RunContext) -> Result<Self, RlError> {
        let states = replay_prompts(&trajectory, ctx)?.iter().map(|p| p.text()).collect();
        Ok(Self { trajectory, skip, states })
    }
}

impl Rollout for Trajectory {
    fn reward(&self) -> Option<f64> {
        self.reward
    }
    fn num_steps(&self) -> usize {
        self.len()
    }
    fn is_valid(&self) -> bool {
        self.termination.is_some_and(|t| !t.is_invalid())
    }
}

impl Rollout for AgentRollout {
    fn reward(&self) -> Option<f64> {
        self.trajectory.reward
    }
    fn num_steps(&self) -> usize {
        self.trajectory.len().saturating_sub(self.skip)
    }
    fn is_valid(&self) -> bool {
        self.trajectory.is_valid() && self.trajectory.len() > self.skip
    }
}

impl ExportableRollout for AgentRollout {
    fn step_payload(&self, step_index: usize) -> StepPayload {
        let i = self.skip + step_index;
        let step = &self.trajectory.steps[i];
        StepPayload { state: self.states[i].clone(), action: step.model_response.clone(), old_logprob: step.logprob }
    }
}
