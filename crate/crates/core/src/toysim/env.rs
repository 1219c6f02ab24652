use rand::Rng;
use serde::{Deserialize, Serialize};

/// Probe-and-answer task with a hidden integer.
///
/// `Probe(k)` reads bit `k % bits` of the hidden answer through a noisy
/// channel (each read flips with probability `p_noise`). `Repeat` re-issues
/// the previous probe and gets back the identical observation, so it never
/// adds information. `Answer` submits the current best guess and ends the
/// episode.
///
/// Observations older than `context_window` steps fall out of view, so long
/// loops of calls push earlier evidence out. Zero disables the window.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyEnv {
    pub probes: usize,
    pub bits: usize,
    pub p_noise: f64,
    pub max_steps: usize,
    pub context_window: usize,
}

impl Default for ToyEnv {
    fn default() -> Self {
        Self { probes: 4, bits: 3, p_noise: 0.1, max_steps: 12, context_window: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ToyAction {
    Probe(usize),
    Repeat,
    Answer,
}

/// Number of step-count buckets in the summary state.
pub const STEP_BUCKETS: usize = 4;

pub fn step_bucket(step: usize) -> usize {
    match step {
        0..=1 => 0,
        2..=3 => 1,
        4..=7 => 2,
        _ => 3,
    }
}

impl ToyEnv {
    pub fn num_actions(&self) -> usize {
        self.probes + 2
    }

    pub fn action(&self, index: usize) -> ToyAction {
        match index {
            i if i < self.probes => ToyAction::Probe(i),
            i if i == self.probes => ToyAction::Repeat,
            _ => ToyAction::Answer,
        }
    }

    pub fn action_index(&self, action: ToyAction) -> usize {
        match action {
            ToyAction::Probe(k) => k,
            ToyAction::Repeat => self.probes,
            ToyAction::Answer => self.probes + 1,
        }
    }

    /// Last-action slots: none, each action except `Answer`.
    fn last_action_slots(&self) -> usize {
        self.probes + 2
    }

    pub fn num_states(&self) -> usize {
        (self.bits + 1) * self.last_action_slots() * STEP_BUCKETS
    }

    /// Summary state: (distinct bits revealed, last action, step bucket).
    pub fn state_index(&self, revealed: usize, last: Option<ToyAction>, step: usize) -> usize {
        let last_slot = match last {
            None => 0,
            Some(a) => 1 + self.action_index(a),
        };
        (revealed * self.last_action_slots() + last_slot) * STEP_BUCKETS + step_bucket(step)
    }

    pub fn sample_hidden<R: Rng + ?Sized>(&self, rng: &mut R) -> u32 {
        rng.random_range(0..(1u32 << self.bits))
    }
}

/// Mutable episode state for one rollout.
#[derive(Debug, Clone)]
pub struct ToyEpisode<'a> {
    env: &'a ToyEnv,
    hidden: u32,
    observed: Vec<Option<(u8, usize)>>,
    last: Option<ToyAction>,
    last_observation: Option<(usize, u8)>,
    pub step: usize,
}

impl<'a> ToyEpisode<'a> {
    pub fn new(env: &'a ToyEnv, hidden: u32) -> Self {
        Self {
            env,
            hidden,
            observed: vec![None; env.bits],
            last: None,
            last_observation: None,
            step: 0,
        }
    }

    fn evict_stale(&mut self) {
        let (window, now) = (self.env.context_window, self.step);
        if window == 0 {
            return;
        }
        for slot in &mut self.observed {
            if matches!(slot, Some((_, t)) if now - *t >= window) {
                *slot = None;
            }
        }
    }

    pub fn revealed(&self) -> usize {
        self.observed.iter().filter(|o| o.is_some()).count()
    }

    pub fn last_action(&self) -> Option<ToyAction> {
        self.last
    }

    pub fn state_index(&self) -> usize {
        self.env.state_index(self.revealed(), self.last, self.step)
    }

    /// Applies a non-terminal action; returns the reward when `action` is
    /// `Answer`.
    pub fn apply<R: Rng + ?Sized>(&mut self, action: ToyAction, rng: &mut R) -> Option<f64> {
        self.step += 1;
        self.evict_stale();
        match action {
            ToyAction::Probe(k) => {
                let bit = k % self.env.bits;
                let truth = ((self.hidden >> bit) & 1) as u8;
                let flip = rng.random::<f64>() < self.env.p_noise;
                let obs = truth ^ u8::from(flip);
                self.observed[bit] = Some((obs, self.step));
                self.last_observation = Some((bit, obs));
                self.last = Some(action);
                None
            }
            ToyAction::Repeat => {
                // identical call, identical (cached) observation
                if let Some((bit, obs)) = self.last_observation {
                    self.observed[bit] = Some((obs, self.step));
                }
                self.last = Some(action);
                None
            }
            ToyAction::Answer => {
                let mut guess = 0u32;
                for (b, obs) in self.observed.iter().enumerate() {
                    let bit = match obs {
                        Some((v, _)) => *v as u32,
                        None => u32::from(rng.random::<bool>()),
                    };
                    guess |= bit << b;
                }
                Some(if guess == self.hidden { 1.0 } else { 0.0 })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn state_indices_are_distinct_and_in_range() {
        let env = ToyEnv::default();
        let mut seen = std::collections::HashSet::new();
        for revealed in 0..=env.bits {
            for last in std::iter::once(None).chain((0..env.num_actions() - 1).map(|i| Some(env.action(i)))) {
                for step in [0, 2, 4, 8] {
                    let s = env.state_index(revealed, last, step);
                    assert!(s < env.num_states());
                    assert!(seen.insert(s));
                }
            }
        }
        assert_eq!(seen.len(), env.num_states());
    }

    #[test]
    fn noiseless_full_probe_answers_correctly() {
        let env = ToyEnv { p_noise: 0.0, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for hidden in 0..8 {
            let mut ep = ToyEpisode::new(&env, hidden);
            for k in 0..3 {
                assert_eq!(ep.apply(ToyAction::Probe(k), &mut rng), None);
            }
            assert_eq!(ep.apply(ToyAction::Answer, &mut rng), Some(1.0));
        }
    }

    #[test]
    fn repeat_adds_no_information() {
        let env = ToyEnv { p_noise: 0.5, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ep = ToyEpisode::new(&env, 5);
        ep.apply(ToyAction::Probe(1), &mut rng);
        let before: Vec<_> = ep.observed.iter().map(|o| o.map(|(v, _)| v)).collect();
        for _ in 0..5 {
            ep.apply(ToyAction::Repeat, &mut rng);
            let now: Vec<_> = ep.observed.iter().map(|o| o.map(|(v, _)| v)).collect();
            assert_eq!(now, before);
        }
        assert_eq!(ep.revealed(), 1);
    }

    #[test]
    fn stale_observations_leave_the_window() {
        let env = ToyEnv { p_noise: 0.0, context_window: 3, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ep = ToyEpisode::new(&env, 7);
        ep.apply(ToyAction::Probe(0), &mut rng);
        ep.apply(ToyAction::Probe(1), &mut rng);
        assert_eq!(ep.revealed(), 2);
        ep.apply(ToyAction::Repeat, &mut rng);
        ep.apply(ToyAction::Repeat, &mut rng);
        // bit 0 seen at step 1 is out of view by step 4; bit 1 was refreshed
        assert_eq!(ep.revealed(), 1);
    }
}
