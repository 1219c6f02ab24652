use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{bump_filter_calls, Rollout, RolloutGroup, RlError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropStrategy {
    /// Drop a seeded random subset of the over-represented class.
    Random,
    /// Keep the shortest trajectories of the over-represented class; the
    /// longest are dropped first.
    HeuristicShortestFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FilterPolicy {
    pub drop_invalid: bool,
    /// Allowed range of positives / negatives.
    pub band: (f64, f64),
    pub drop_strategy: DropStrategy,
    /// Rewards at or above this value count as positive.
    pub positive_threshold: f64,
}

impl Default for FilterPolicy {
    fn default() -> Self {
        Self {
            drop_invalid: true,
            band: (1.0 / 3.0, 3.0),
            drop_strategy: DropStrategy::Random,
            positive_threshold: 0.5,
        }
    }
}

impl FilterPolicy {
    pub fn validate(&self) -> Result<(), RlError> {
        let (low, high) = self.band;
        if !(low > 0.0 && low <= high && high.is_finite()) {
            return Err(RlError::BadBand { low, high });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterStats {
    pub input: usize,
    pub invalid_dropped: usize,
    pub ratio_dropped: usize,
    pub positives: usize,
    pub negatives: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome<R> {
    pub group: RolloutGroup<R>,
    /// Index in the input group of every retained trajectory.
    pub kept: Vec<usize>,
    pub stats: FilterStats,
}

const RATIO_TOL: f64 = 1e-12;

fn in_band(pos: usize, neg: usize, (low, high): (f64, f64)) -> bool {
    if pos == 0 || neg == 0 {
        return true;
    }
    let ratio = pos as f64 / neg as f64;
    ratio >= low - RATIO_TOL && ratio <= high + RATIO_TOL
}

/// Largest (pos, neg) counts, no larger than the inputs, whose ratio lies in
/// the band with both classes non-empty. Falls back to keeping only the
/// larger class when no such pair exists.
fn target_counts(pos: usize, neg: usize, band: (f64, f64)) -> (usize, usize) {
    if in_band(pos, neg, band) {
        return (pos, neg);
    }
    let mut best: Option<(usize, usize)> = None;
    for p in 1..=pos {
        for n in 1..=neg {
            if in_band(p, n, band) && best.is_none_or(|(bp, bn)| p + n > bp + bn) {
                best = Some((p, n));
            }
        }
    }
    best.unwrap_or(if pos >= neg { (pos, 0) } else { (0, neg) })
}

/// Removes invalid rollouts, then drops over-represented positives or
/// negatives until the positive:negative ratio lies inside the band.
/// Deterministic for a fixed `rng_seed`.
pub fn filter_trajectories<R: Rollout>(
    group: RolloutGroup<R>,
    policy: &FilterPolicy,
    rng_seed: u64,
) -> Result<FilterOutcome<R>, RlError> {
    bump_filter_calls();
    policy.validate()?;
    let mut stats = FilterStats { input: group.len(), ..Default::default() };

    let mut candidates = Vec::new();
    for (i, t) in group.trajectories.iter().enumerate() {
        if policy.drop_invalid && !t.is_valid() {
            stats.invalid_dropped += 1;
            continue;
        }
        let reward = t.reward().ok_or(RlError::MissingReward(i))?;
        candidates.push((i, reward >= policy.positive_threshold, t.num_steps()));
    }
    if candidates.is_empty() {
        return Err(RlError::EmptyAfterFilter);
    }

    let positives: Vec<(usize, usize)> =
        candidates.iter().filter(|c| c.1).map(|c| (c.0, c.2)).collect();
    let negatives: Vec<(usize, usize)> =
        candidates.iter().filter(|c| !c.1).map(|c| (c.0, c.2)).collect();
    let (keep_pos, keep_neg) = target_counts(positives.len(), negatives.len(), policy.band);

    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut kept = select(&positives, keep_pos, policy.drop_strategy, &mut rng);
    kept.extend(select(&negatives, keep_neg, policy.drop_strategy, &mut rng));
    kept.sort_unstable();

    stats.ratio_dropped = candidates.len() - kept.len();
    stats.positives = keep_pos;
    stats.negatives = keep_neg;

    let mut slots: Vec<Option<R>> = group.trajectories.into_iter().map(Some).collect();
    let trajectories = kept.iter().map(|&i| slots[i].take().expect("index kept once")).collect();
    Ok(FilterOutcome {
        group: RolloutGroup { seed_id: group.seed_id, trajectories },
        kept,
        stats,
    })
}

fn select(
    class: &[(usize, usize)],
    keep: usize,
    strategy: DropStrategy,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    if keep >= class.len() {
        return class.iter().map(|c| c.0).collect();
    }
    let mut order = class.to_vec();
    match strategy {
        DropStrategy::Random => order.shuffle(rng),
        DropStrategy::HeuristicShortestFirst => order.sort_by_key(|&(i, len)| (len, i)),
    }
    order.truncate(keep);
    order.into_iter().map(|c| c.0).collect()
}
