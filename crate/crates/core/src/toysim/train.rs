use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::env::{ToyAction, ToyEnv, ToyEpisode};
use super::policy::{SoftmaxPolicy, ToyRecord};
use crate::rl::{
    compute_advantages_with, filter_trajectories, AdvantageOptions, FilterPolicy, Rollout,
    RolloutGroup, RlError, DEFAULT_ADVANTAGE_EPS,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyStep {
    pub state: usize,
    pub action: usize,
    pub logprob_bits: u64,
}

impl ToyStep {
    pub fn logprob(&self) -> f64 {
        f64::from_bits(self.logprob_bits)
    }
}

/// One toy rollout; every step shares the terminal reward.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToyTrajectory {
    pub hidden: u32,
    pub steps: Vec<ToyStep>,
    /// 1.0 for a correct answer, 0.0 for a wrong one or a truncated rollout.
    reward_bits: u64,
    pub answered: bool,
    /// Steps that re-issued the previous call unchanged.
    pub repeated_calls: usize,
}

impl ToyTrajectory {
    pub fn reward_value(&self) -> f64 {
        f64::from_bits(self.reward_bits)
    }
}

impl Rollout for ToyTrajectory {
    fn reward(&self) -> Option<f64> {
        Some(self.reward_value())
    }
    fn num_steps(&self) -> usize {
        self.steps.len()
    }
    fn is_valid(&self) -> bool {
        self.answered
    }
}

/// Samples one episode. A rollout that exhausts `max_steps` without
/// answering is truncated (invalid, reward 0).
pub fn toy_rollout(policy: &SoftmaxPolicy, env: &ToyEnv, hidden: u32, rng_seed: u64) -> ToyTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut episode = ToyEpisode::new(env, hidden);
    let mut steps = Vec::new();
    let mut repeated_calls = 0;
    let mut reward = 0.0;
    let mut answered = false;
    while steps.len() < env.max_steps {
        let state = episode.state_index();
        let (action_index, logprob) = policy.sample(state, &mut rng);
        steps.push(ToyStep { state, action: action_index, logprob_bits: logprob.to_bits() });
        let action = env.action(action_index);
        let previous = episode.last_action();
        if action == ToyAction::Repeat
            || (matches!(action, ToyAction::Probe(_)) && previous == Some(action))
        {
            repeated_calls += 1;
        }
        if let Some(r) = episode.apply(action, &mut rng) {
            reward = r;
            answered = true;
            break;
        }
    }
    ToyTrajectory { hidden, steps, reward_bits: f64::to_bits(reward), answered, repeated_calls }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientStepOptions {
    pub use_length_norm: bool,
    pub clip_eps: f64,
    pub lr: f64,
    pub shared_lr: f64,
    pub eps: f64,
}

/// Converts groups into step records using the shared advantage code.
/// With `use_length_norm` off the trajectory length is replaced by 1.
pub fn build_records(
    groups: &[RolloutGroup<ToyTrajectory>],
    use_length_norm: bool,
    eps: f64,
) -> Result<Vec<ToyRecord>, RlError> {
    let opts = AdvantageOptions { eps, length_normalization: use_length_norm };
    let mut records = Vec::new();
    for group in groups {
        for adv in compute_advantages_with(group, opts)? {
            let step = group.trajectories[adv.trajectory_index].steps[adv.step_index];
            records.push(ToyRecord {
                state: step.state,
                action: step.action,
                old_logprob: step.logprob(),
                advantage: adv.advantage,
            });
        }
    }
    Ok(records)
}

/// One plain gradient-descent step on the clipped surrogate loss.
pub fn apply_gradient(
    policy: &SoftmaxPolicy,
    records: &[ToyRecord],
    clip_eps: f64,
    lr: f64,
    shared_lr: f64,
) -> Result<SoftmaxPolicy, RlError> {
    let grad = policy.surrogate_gradient(records, clip_eps)?;
    let mut next = policy.clone();
    let n = next.theta.len();
    for (i, g) in grad.iter().enumerate() {
        if *g == 0.0 {
            continue;
        }
        if i < n {
            let value = next.theta[i] - lr * g;
            next.set_logit(i / next.num_actions, i % next.num_actions, value);
        } else {
            let value = next.shared[i - n] - shared_lr * g;
            next.set_shared(i - n, value);
        }
    }
    Ok(next)
}

/// Advantages (with or without length normalization) followed by one
/// gradient step.
pub fn policy_gradient_step(
    policy: &SoftmaxPolicy,
    groups: &[RolloutGroup<ToyTrajectory>],
    opts: GradientStepOptions,
) -> Result<SoftmaxPolicy, RlError> {
    let records = build_records(groups, opts.use_length_norm, opts.eps)?;
    apply_gradient(policy, &records, opts.clip_eps, opts.lr, opts.shared_lr)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyTrainConfig {
    pub env: ToyEnv,
    pub iterations: usize,
    pub group_size: usize,
    pub groups_per_iteration: usize,
    pub use_length_norm: bool,
    pub seed: u64,
    pub lr: f64,
    /// Step size for the state-independent action bias.
    pub shared_lr: f64,
    pub clip_eps: f64,
    /// Gradient steps taken on each collected batch.
    pub epochs: usize,
    pub prior_strength: f64,
    pub answer_bias: f64,
    pub filter: FilterPolicy,
    pub eps: f64,
}

impl Default for ToyTrainConfig {
    fn default() -> Self {
        Self {
            env: ToyEnv::default(),
            iterations: 200,
            group_size: 8,
            groups_per_iteration: 8,
            use_length_norm: true,
            seed: 0,
            lr: 20.0,
            shared_lr: 60.0,
            clip_eps: 0.2,
            epochs: 1,
            prior_strength: 3.0,
            answer_bias: 0.0,
            filter: FilterPolicy::default(),
            eps: DEFAULT_ADVANTAGE_EPS,
        }
    }
}

/// Per-iteration training statistics, computed over every sampled rollout
/// (truncated rollouts count as reward 0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IterationMetrics {
    pub iteration: usize,
    pub mean_length: f64,
    pub mean_reward: f64,
    pub repetition_rate: f64,
    pub truncation_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRunMetrics {
    pub history: Vec<IterationMetrics>,
    pub final_policy: SoftmaxPolicy,
}

impl TrainRunMetrics {
    /// Mean of each metric over the first / last `window` iterations.
    pub fn window_mean(&self, window: usize, from_end: bool) -> IterationMetrics {
        let n = self.history.len();
        let w = window.clamp(1, n.max(1));
        let slice = if from_end { &self.history[n - w..] } else { &self.history[..w] };
        let k = slice.len() as f64;
        IterationMetrics {
            iteration: slice.last().map(|m| m.iteration).unwrap_or(0),
            mean_length: slice.iter().map(|m| m.mean_length).sum::<f64>() / k,
            mean_reward: slice.iter().map(|m| m.mean_reward).sum::<f64>() / k,
            repetition_rate: slice.iter().map(|m| m.repetition_rate).sum::<f64>() / k,
            truncation_rate: slice.iter().map(|m| m.truncation_rate).sum::<f64>() / k,
        }
    }

    /// CSV with columns `iteration,mean_length,mean_reward,repetition_rate`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> io::Result<()> {
        writeln!(out, "iteration,mean_length,mean_reward,repetition_rate")?;
        for m in &self.history {
            writeln!(out, "{},{},{},{}", m.iteration, m.mean_length, m.mean_reward, m.repetition_rate)?;
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, a: u64, b: u64, c: u64) -> u64 {
    let mut x = seed ^ 0x243F_6A88_85A3_08D3;
    for v in [a, b, c] {
        x = (x ^ v).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        x ^= x >> 29;
    }
    x
}

/// Rollout -> filter -> advantage -> clipped-surrogate update loop.
pub fn train_toy(config: &ToyTrainConfig) -> Result<TrainRunMetrics, RlError> {
    let env = config.env;
    let mut policy = SoftmaxPolicy::with_prior(&env, config.prior_strength, config.answer_bias);
    let mut history = Vec::with_capacity(config.iterations);

    for iteration in 0..config.iterations.max(1) {
        let mut task_rng = ChaCha8Rng::seed_from_u64(mix_seed(config.seed, iteration as u64, 0, 0));
        let hidden: Vec<u32> = (0..config.groups_per_iteration).map(|_| env.sample_hidden(&mut task_rng)).collect();

        let jobs: Vec<(usize, usize)> = (0..config.groups_per_iteration)
            .flat_map(|q| (0..config.group_size).map(move |g| (q, g)))
            .collect();
        let rollouts: Vec<ToyTrajectory> = jobs
            .par_iter()
            .map(|&(q, g)| {
                let seed = mix_seed(config.seed, iteration as u64, q as u64 + 1, g as u64 + 1);
                toy_rollout(&policy, &env, hidden[q], seed)
            })
            .collect();

        let total_steps: usize = rollouts.iter().map(|t| t.steps.len()).sum();
        let n = rollouts.len() as f64;
        history.push(IterationMetrics {
            iteration,
            mean_length: total_steps as f64 / n,
            mean_reward: rollouts.iter().map(ToyTrajectory::reward_value).sum::<f64>() / n,
            repetition_rate: rollouts.iter().map(|t| t.repeated_calls).sum::<usize>() as f64
                / total_steps.max(1) as f64,
            truncation_rate: rollouts.iter().filter(|t| !t.answered).count() as f64 / n,
        });

        let mut groups = Vec::new();
        let mut chunks = rollouts.into_iter();
        for q in 0..config.groups_per_iteration {
            let members: Vec<ToyTrajectory> = chunks.by_ref().take(config.group_size).collect();
            let group = RolloutGroup::new(format!("{iteration}/{q}"), members);
            let filter_seed = mix_seed(config.seed, iteration as u64, q as u64, 7);
            match filter_trajectories(group, &config.filter, filter_seed) {
                Ok(outcome) if outcome.group.len() >= 2 => groups.push(outcome.group),
                Ok(_) | Err(RlError::EmptyAfterFilter) => {}
                Err(e) => return Err(e),
            }
        }
        if groups.is_empty() {
            continue;
        }
        let records = build_records(&groups, config.use_length_norm, config.eps)?;
        for _ in 0..config.epochs.max(1) {
            policy = apply_gradient(&policy, &records, config.clip_eps, config.lr, config.shared_lr)?;
        }
    }
    Ok(TrainRunMetrics { history, final_policy: policy })
}

/// Convenience used by the gradient-check tests: random small records over
/// the toy state space.
pub fn random_records<R: Rng + ?Sized>(
    policy: &SoftmaxPolicy,
    count: usize,
    rng: &mut R,
) -> Vec<ToyRecord> {
    (0..count)
        .map(|_| {
            let state = rng.random_range(0..policy.num_states);
            let action = rng.random_range(0..policy.num_actions);
            ToyRecord {
                state,
                action,
                old_logprob: policy.log_prob(state, action) + rng.random_range(-0.5..0.5),
                advantage: rng.random_range(-2.0..2.0),
            }
        })
        .collect()
}
