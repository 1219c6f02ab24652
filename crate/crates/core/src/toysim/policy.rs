use rand::Rng;
use serde::{Deserialize, Serialize};

use super::env::{ToyAction, ToyEnv, STEP_BUCKETS};
use crate::rl::{surrogate_logp_gradient, clipped_surrogate_loss, LossTerm, RlError};

/// Logits are kept inside this range so that a "forced" action is
/// representable without overflowing the softmax.
pub const LOGIT_CLAMP: f64 = 60.0;

/// Softmax policy whose logits are a per-(state, action) table plus a
/// per-action bias shared by every state.
///
/// The shared row stands in for the state-independent habits of a large
/// model: reinforcing an action in one state makes it likelier everywhere.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftmaxPolicy {
    pub num_states: usize,
    pub num_actions: usize,
    pub theta: Vec<f64>,
    pub shared: Vec<f64>,
}

/// One step-level training record.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyRecord {
    pub state: usize,
    pub action: usize,
    pub old_logprob: f64,
    pub advantage: f64,
}

impl SoftmaxPolicy {
    pub fn uniform(env: &ToyEnv) -> Self {
        Self {
            num_states: env.num_states(),
            num_actions: env.num_actions(),
            theta: vec![0.0; env.num_states() * env.num_actions()],
            shared: vec![0.0; env.num_actions()],
        }
    }

    /// A weak heuristic prior: probe the bits in order, answer once every bit
    /// has been read. `answer_bias` is added to every `Answer` logit.
    pub fn with_prior(env: &ToyEnv, strength: f64, answer_bias: f64) -> Self {
        let mut policy = Self::uniform(env);
        let answer = env.action_index(ToyAction::Answer);
        let last_options: Vec<Option<ToyAction>> = std::iter::once(None)
            .chain((0..env.num_actions() - 1).map(|i| Some(env.action(i))))
            .collect();
        for revealed in 0..=env.bits {
            for last in &last_options {
                for bucket_step in [0, 2, 4, 8].into_iter().take(STEP_BUCKETS) {
                    let s = env.state_index(revealed, *last, bucket_step);
                    let favored = if revealed == env.bits {
                        answer
                    } else {
                        match last {
                            Some(ToyAction::Probe(k)) => (k + 1) % env.bits,
                            _ => 0,
                        }
                    };
                    policy.theta[s * env.num_actions() + favored] += strength;
                    policy.theta[s * env.num_actions() + answer] += answer_bias;
                }
            }
        }
        policy
    }

    pub fn logits(&self, state: usize) -> Vec<f64> {
        self.theta[state * self.num_actions..(state + 1) * self.num_actions]
            .iter()
            .zip(&self.shared)
            .map(|(t, b)| t + b)
            .collect()
    }

    pub fn set_logit(&mut self, state: usize, action: usize, value: f64) {
        self.theta[state * self.num_actions + action] = value.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    }

    pub fn set_shared(&mut self, action: usize, value: f64) {
        self.shared[action] = value.clamp(-LOGIT_CLAMP, LOGIT_CLAMP);
    }

    /// Parameter vector: `theta` followed by `shared`.
    pub fn params(&self) -> Vec<f64> {
        self.theta.iter().chain(&self.shared).copied().collect()
    }

    pub fn probs(&self, state: usize) -> Vec<f64> {
        let logits = self.logits(state);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / z).collect()
    }

    pub fn log_prob(&self, state: usize, action: usize) -> f64 {
        let logits = self.logits(state);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        logits[action] - lse
    }

    pub fn sample<R: Rng + ?Sized>(&self, state: usize, rng: &mut R) -> (usize, f64) {
        let probs = self.probs(state);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut chosen = probs.len() - 1;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = a;
                break;
            }
        }
        (chosen, probs[chosen].ln())
    }

    fn loss_terms(records: &[ToyRecord]) -> Vec<LossTerm> {
        records
            .iter()
            .map(|r| LossTerm { advantage: r.advantage, old_logprob: Some(r.old_logprob) })
            .collect()
    }

    fn new_logps(&self, records: &[ToyRecord]) -> Vec<f64> {
        records.iter().map(|r| self.log_prob(r.state, r.action)).collect()
    }

    /// Clipped surrogate loss of `records` under the current parameters.
    pub fn surrogate_loss(&self, records: &[ToyRecord], clip_eps: f64) -> Result<f64, RlError> {
        clipped_surrogate_loss(&Self::loss_terms(records), &self.new_logps(records), clip_eps)
    }

    /// Analytic gradient of [`Self::surrogate_loss`] with respect to
    /// [`Self::params`].
    pub fn surrogate_gradient(&self, records: &[ToyRecord], clip_eps: f64) -> Result<Vec<f64>, RlError> {
        let dlogp = surrogate_logp_gradient(&Self::loss_terms(records), &self.new_logps(records), clip_eps)?;
        let n = self.theta.len();
        let mut grad = vec![0.0; n + self.num_actions];
        for (r, d) in records.iter().zip(dlogp) {
            if d == 0.0 {
                continue;
            }
            let probs = self.probs(r.state);
            for (b, p) in probs.iter().enumerate() {
                let indicator = if b == r.action { 1.0 } else { 0.0 };
                let g = d * (indicator - p);
                grad[r.state * self.num_actions + b] += g;
                grad[n + b] += g;
            }
        }
        Ok(grad)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn probabilities_are_positive_and_normalized() {
        let env = ToyEnv::default();
        let policy = SoftmaxPolicy::with_prior(&env, 2.0, 0.5);
        for s in 0..env.num_states() {
            let p = policy.probs(s);
            assert!(p.iter().all(|x| *x > 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for (a, pa) in p.iter().enumerate() {
                assert!((policy.log_prob(s, a) - pa.ln()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn sampled_logprob_matches_analytic() {
        let env = ToyEnv::default();
        let policy = SoftmaxPolicy::with_prior(&env, 1.0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for s in 0..20 {
            let (a, lp) = policy.sample(s, &mut rng);
            assert!((lp - policy.log_prob(s, a)).abs() < 1e-12);
        }
    }

    #[test]
    fn logits_are_clamped() {
        let env = ToyEnv::default();
        let mut policy = SoftmaxPolicy::uniform(&env);
        policy.set_logit(0, 0, 1e9);
        assert_eq!(policy.logits(0)[0], LOGIT_CLAMP);
    }
}
