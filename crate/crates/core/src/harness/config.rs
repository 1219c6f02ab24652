use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::agent::{EpisodeBudget, FaultCaps, RunContext};
use crate::memory::ContextBudget;
use crate::policy::PolicyProfile;
use crate::reward::DEFAULT_MIX;
use crate::rl::{FilterPolicy, DEFAULT_ADVANTAGE_EPS};
use crate::toolbox::DEFAULT_SECTION_LIMIT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    #[default]
    SingleTurn,
    MultiTurn,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicySection {
    pub base_url: Option<String>,
    pub model: String,
    pub profile: ProfileKind,
    pub max_tokens: Option<usize>,
    pub temperature: Option<f64>,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self { base_url: None, model: "default".into(), profile: ProfileKind::default(), max_tokens: None, temperature: None }
    }
}

impl PolicySection {
    pub fn profile(&self) -> PolicyProfile {
        let mut p = match self.profile {
            ProfileKind::SingleTurn => PolicyProfile::single_turn(),
            ProfileKind::MultiTurn => PolicyProfile::multi_turn(),
        };
        if let Some(m) = self.max_tokens {
            p.generation.max_tokens = m;
        }
        if let Some(t) = self.temperature {
            p.generation.temperature = t;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BudgetSection {
    pub context_tokens: usize,
    pub memory_tokens: usize,
    pub reserve_tokens: usize,
    pub max_steps: usize,
    pub wall_clock_secs: Option<u64>,
    pub retry_cap: usize,
    pub hard_cap: usize,
}

impl Default for BudgetSection {
    fn default() -> Self {
        let c = ContextBudget::default();
        let b = EpisodeBudget::default();
        let f = FaultCaps::default();
        Self {
            context_tokens: c.total,
            memory_tokens: c.memory,
            reserve_tokens: c.reserve,
            max_steps: b.max_steps,
            wall_clock_secs: b.wall_clock.map(|d| d.as_secs()),
            retry_cap: f.retry_cap,
            hard_cap: f.hard_cap,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToolboxSection {
    pub blocklist: Option<PathBuf>,
    pub allow_unblocked: bool,
    pub cache_dir: Option<PathBuf>,
    pub section_limit: usize,
    pub exec_timeout_secs: u64,
    pub search_endpoint: Option<String>,
}

impl Default for ToolboxSection {
    fn default() -> Self {
        Self {
            blocklist: None,
            allow_unblocked: false,
            cache_dir: None,
            section_limit: DEFAULT_SECTION_LIMIT,
            exec_timeout_secs: 300,
            search_endpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RlSection {
    pub group_size: usize,
    pub clip_eps: f64,
    pub band: (f64, f64),
    pub eps: f64,
    pub seed: u64,
    pub partial_rollouts: bool,
}

impl Default for RlSection {
    fn default() -> Self {
        Self {
            group_size: 8,
            clip_eps: 0.2,
            band: FilterPolicy::default().band,
            eps: DEFAULT_ADVANTAGE_EPS,
            seed: 0,
            partial_rollouts: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub judge_base_url: Option<String>,
    pub judge_model: Option<String>,
    pub mix: f64,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self { judge_base_url: None, judge_model: None, mix: DEFAULT_MIX }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub policy: PolicySection,
    pub budgets: BudgetSection,
    pub toolbox: ToolboxSection,
    pub rl: RlSection,
    pub reward: RewardSection,
}

impl HarnessConfig {
    pub fn load(path: &Path) -> Result<Self, HarnessError> {
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.context_budget()?;
        if self.rl.group_size < 2 {
            return Err(HarnessError::Config(format!("rl.group_size must be at least 2, got {}", self.rl.group_size)));
        }
        if !(self.rl.clip_eps > 0.0 && self.rl.clip_eps < 1.0) {
            return Err(HarnessError::Config(format!("rl.clip_eps must lie in (0, 1), got {}", self.rl.clip_eps)));
        }
        self.filter_policy().validate().map_err(|e| HarnessError::Config(e.to_string()))?;
        if !(0.0..=1.0).contains(&self.reward.mix) {
            return Err(HarnessError::Config(format!("reward.mix must lie in [0, 1], got {}", self.reward.mix)));
        }
        Ok(())
    }

    pub fn context_budget(&self) -> Result<ContextBudget, HarnessError> {
        let b = &self.budgets;
        ContextBudget::new(b.context_tokens, b.memory_tokens, b.reserve_tokens).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn filter_policy(&self) -> FilterPolicy {
        FilterPolicy { band: self.rl.band, ..FilterPolicy::default() }
    }

    pub fn run_context(&self) -> Result<RunContext, HarnessError> {
        let mut ctx = RunContext::new(self.policy.profile()).with_context(self.context_budget()?);
        ctx.budget = EpisodeBudget {
            max_steps: self.budgets.max_steps,
            wall_clock: self.budgets.wall_clock_secs.map(Duration::from_secs),
        };
        ctx.caps = FaultCaps { retry_cap: self.budgets.retry_cap, hard_cap: self.budgets.hard_cap };
        Ok(ctx)
    }
}
