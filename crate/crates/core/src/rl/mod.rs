//! Group-relative RL recipe: length-normalized advantages, trajectory
//! filtering, partial-rollout reseeding, the clipped surrogate loss and
//! training-batch assembly.
//!
//! Everything here is a pure function over completed rollouts. The agent
//! runtime and the toy simulator both feed their trajectories through the
//! same [`Rollout`] trait so that there is exactly one implementation of the
//! advantage and filtering rules.

mod advantage;
mod batch;
mod filter;
mod loss;
mod partial;

use std::sync::atomic::{AtomicU64, Ordering};

use thiserror::Error;

pub use advantage::{compute_advantages, compute_advantages_with, AdvantageOptions, AdvantageRecord};
pub use batch::{assemble_batch, GroupStatus, BatchMetadata, BatchRecord, GroupSummary, RewardStats, StepPayload, TrainingBatch};
pub use filter::{filter_trajectories, DropStrategy, FilterOutcome, FilterPolicy, FilterStats};
pub use loss::{clipped_surrogate_loss, surrogate_logp_gradient, LossTerm};
pub use partial::{cut_candidates, select_cut_points, spawn_partial_seeds, AgentRollout, PartialSeed, MAX_SEEDS_PER_ORIGIN};

/// Default epsilon added to the group reward standard deviation.
pub const DEFAULT_ADVANTAGE_EPS: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RlError {
    #[error("group has {0} trajectories; at least 2 are required")]
    DegenerateGroup(usize),
    #[error("trajectory {0} has no reward")]
    MissingReward(usize),
    #[error("advantage epsilon must be positive, got {0}")]
    BadEpsilon(f64),
    #[error("no trajectories left after filtering")]
    EmptyAfterFilter,
    #[error("cut point {cut} is outside 1..{len}")]
    BadCutPoint { cut: usize, len: usize },
    #[error("record {0} has no old log-probability")]
    MissingLogProb(usize),
    #[error("clip epsilon must lie in (0, 1), got {0}")]
    BadClip(f64),
    #[error("expected {expected} new log-probabilities, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("cannot rebuild trajectory state: {0}")]
    Replay(String),
    #[error("invalid filter band ({low}, {high})")]
    BadBand { low: f64, high: f64 },
}

/// A finished rollout as seen by the RL engine.
pub trait Rollout {
    /// Terminal reward; every step of the rollout shares it.
    fn reward(&self) -> Option<f64>;
    /// Number of agentic steps `T`.
    fn num_steps(&self) -> usize;
    /// False for rollouts that ended in truncation or a format failure.
    fn is_valid(&self) -> bool;
}

/// A rollout whose steps can be exported into a training batch.
pub trait ExportableRollout: Rollout {
    fn step_payload(&self, step_index: usize) -> StepPayload;
}

/// `G` sibling rollouts started from the same seed state.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup<R> {
    pub seed_id: String,
    pub trajectories: Vec<R>,
}

impl<R: Rollout> RolloutGroup<R> {
    pub fn new(seed_id: impl Into<String>, trajectories: Vec<R>) -> Self {
        Self { seed_id: seed_id.into(), trajectories }
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Rewards aligned with `trajectories`.
    pub fn rewards(&self) -> Result<Vec<f64>, RlError> {
        self.trajectories
            .iter()
            .enumerate()
            .map(|(i, t)| t.reward().ok_or(RlError::MissingReward(i)))
            .collect()
    }
}

static ADVANTAGE_CALLS: AtomicU64 = AtomicU64::new(0);
static FILTER_CALLS: AtomicU64 = AtomicU64::new(0);

/// Process-wide counts of advantage and filter invocations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CallCounts {
    pub advantages: u64,
    pub filters: u64,
}

pub fn call_counts() -> CallCounts {
    CallCounts {
        advantages: ADVANTAGE_CALLS.load(Ordering::Relaxed),
        filters: FILTER_CALLS.load(Ordering::Relaxed),
    }
}

pub(crate) fn bump_advantage_calls() {
    ADVANTAGE_CALLS.fetch_add(1, Ordering::Relaxed);
}

pub(crate) fn bump_filter_calls() {
    FILTER_CALLS.fetch_add(1, Ordering::Relaxed);
}

/// Minimal rollout used by unit tests and by callers that only carry
/// (reward, length, validity).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredRollout {
    pub reward: Option<f64>,
    pub steps: usize,
    pub valid: bool,
}

impl ScoredRollout {
    pub fn new(reward: f64, steps: usize) -> Self {
        Self { reward: Some(reward), steps, valid: true }
    }

    pub fn invalid(reward: f64, steps: usize) -> Self {
        Self { reward: Some(reward), steps, valid: false }
    }
}

impl Rollout for ScoredRollout {
    fn reward(&self) -> Option<f64> {
        self.reward
    }
    fn num_steps(&self) -> usize {
        self.steps
    }
    fn is_valid(&self) -> bool {
        self.valid
    }
}

impl ExportableRollout for ScoredRollout {
    fn step_payload(&self, step_index: usize) -> StepPayload {
        StepPayload {
            state: format!("step {step_index}"),
            action: String::new(),
            old_logprob: None,
        }
    }
}
