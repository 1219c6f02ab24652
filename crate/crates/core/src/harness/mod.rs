//! Evaluation and rollout-collection runs over a dataset, with a resumable
//! ledger, bounded concurrency and offline behavior statistics.

mod config;
mod dataset;
mod ledger;
mod stats;

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{run_from, Episode, Gold, Question, RunContext, Termination, Trajectory};
use crate::policy::Policy;
use crate::reward::{judge_short_form, rank_reports, score_report, total_reward, Judge, ShortFormVerdict, DEFAULT_MIX};
use crate::rl::{
    assemble_batch, select_cut_points, spawn_partial_seeds, AgentRollout, BatchMetadata, FilterPolicy, RlError,
    RolloutGroup, TrainingBatch, DEFAULT_ADVANTAGE_EPS, MAX_SEEDS_PER_ORIGIN,
};
use crate::toolbox::{ToolExecutor, ToolResult};

pub use config::{BudgetSection, HarnessConfig, PolicySection, ProfileKind, RewardSection, RlSection, ToolboxSection};
pub use dataset::{DatasetRecord, EvalTask, Scoring};
pub use ledger::{JobStatus, LedgerEntry, RunLedger, JOURNAL_FILE, TRAJECTORY_DIR};
pub use stats::{compute_stats, BehaviorStats, EMPTY_NOTE};

pub const DEFAULT_CONCURRENCY: usize = 8;

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_PARTIAL: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Dataset { path: String, line: usize, reason: String },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("refusing to evaluate without a contamination blocklist; pass --allow-unblocked to override")]
    Unblocked,
    #[error(transparent)]
    Rl(#[from] RlError),
}

impl HarnessError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        Self::Io { path: path.display().to_string(), source }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) | Self::Unblocked | Self::Dataset { .. } => EXIT_CONFIG,
            _ => EXIT_FAILURE,
        }
    }
}

/// What a worker needs a fresh policy for.
#[derive(Debug, Clone, Copy)]
pub struct PolicyRequest<'a> {
    pub question: &'a Question,
    /// Index of the sample within its group.
    pub sample: usize,
    /// Steps already taken when the policy takes over.
    pub prefix_len: usize,
}

/// Builds one policy per episode.
pub trait PolicyFactory: Sync {
    fn make(&self, request: &PolicyRequest) -> Box<dyn Policy>;
}

impl<F> PolicyFactory for F
where
    F: Fn(&PolicyRequest) -> Box<dyn Policy> + Sync,
{
    fn make(&self, request: &PolicyRequest) -> Box<dyn Policy> {
        self(request)
    }
}

struct Job {
    key: String,
    sample: usize,
    prefix_len: usize,
    start: Episode,
}

#[derive(Debug, Clone, Default)]
struct Scored {
    reward: Option<f64>,
    verdict: Option<ShortFormVerdict>,
}

#[derive(Default)]
struct JobOutcomes {
    done: BTreeMap<String, (Trajectory, Option<ShortFormVerdict>)>,
    failed: BTreeMap<String, String>,
    pending: usize,
}

/// Shared worker-pool plumbing for eval and rollout runs.
struct Runner<'a> {
    factory: &'a dyn PolicyFactory,
    tools: &'a dyn ToolExecutor,
    ledger: &'a RunLedger,
    concurrency: usize,
    /// Jobs this invocation may still start; `None` is unbounded.
    budget: Option<&'a AtomicUsize>,
}

fn fatal_message(t: &Trajectory) -> String {
    match t.steps.last().and_then(|s| s.tool_result.as_ref()) {
        Some(ToolResult::Error { message }) => message.clone(),
        _ => "episode ended with a fatal environment error".into(),
    }
}

impl Runner<'_> {
    fn claim(&self) -> bool {
        match self.budget {
            None => true,
            Some(b) => b.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1)).is_ok(),
        }
    }

    fn run(&self, jobs: Vec<Job>, score: &(dyn Fn(&Trajectory) -> Scored + Sync)) -> Result<JobOutcomes, HarnessError> {
        let mut out = JobOutcomes::default();
        let mut todo = Vec::new();
        for job in jobs {
            if self.ledger.status(&job.key) == JobStatus::Done {
                match self.ledger.load_trajectory(&job.key) {
                    Ok(t) => {
                        let verdict = self.ledger.entry(&job.key).and_then(|e| e.verdict);
                        out.done.insert(job.key, (t, verdict));
                        continue;
                    }
                    Err(e) => log::warn!("rerunning {}: stored trajectory unreadable: {e}", job.key),
                }
            }
            todo.push(job);
        }

        let next = AtomicUsize::new(0);
        let results = Mutex::new(Vec::new());
        let first_err: Mutex<Option<HarnessError>> = Mutex::new(None);
        let workers = self.concurrency.max(1).min(todo.len().max(1));
        std::thread::scope(|s| {
            for _ in 0..workers {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(job) = todo.get(i) else { break };
                    if !self.claim() {
                        break;
                    }
                    let res = self.run_one(job, score);
                    match res {
                        Ok(r) => results.lock().unwrap_or_else(|e| e.into_inner()).push((job.key.clone(), r)),
                        Err(e) => {
                            first_err.lock().unwrap_or_else(|e| e.into_inner()).get_or_insert(e);
                        }
                    }
                });
            }
        });
        if let Some(e) = first_err.into_inner().unwrap_or_else(|e| e.into_inner()) {
            return Err(e);
        }
        let results = results.into_inner().unwrap_or_else(|e| e.into_inner());
        out.pending = todo.len() - results.len();
        for (key, r) in results {
            match r {
                Ok(done) => {
                    out.done.insert(key, done);
                }
                Err(msg) => {
                    out.failed.insert(key, msg);
                }
            }
        }
        Ok(out)
    }

    /// Outer error: the ledger could not be written. Inner error: the job
    /// failed and was recorded as such.
    #[allow(clippy::type_complexity)]
    fn run_one(
        &self,
        job: &Job,
        score: &(dyn Fn(&Trajectory) -> Scored + Sync),
    ) -> Result<Result<(Trajectory, Option<ShortFormVerdict>), String>, HarnessError> {
        let question = &job.start.trajectory.question;
        let ran = catch_unwind(AssertUnwindSafe(|| {
            let request = PolicyRequest { question, sample: job.sample, prefix_len: job.prefix_len };
            let mut policy = self.factory.make(&request);
            let mut episode = job.start.clone();
            run_from(&mut episode, policy.as_mut(), self.tools);
            let mut t = episode.trajectory;
            let scored = score(&t);
            if scored.reward.is_some() {
                t.reward = scored.reward;
            }
            (t, scored.verdict)
        }));
        let failure = match &ran {
            Err(panic) => Some(
                panic
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| panic.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "worker panicked".into()),
            ),
            Ok((t, _)) if t.termination == Some(Termination::ToolFatal) => Some(fatal_message(t)),
            Ok(_) => None,
        };
        if let Some(msg) = failure {
            log::warn!("{} failed: {msg}", job.key);
            self.ledger.record_failed(&job.key, &msg)?;
            return Ok(Err(msg));
        }
        let (t, verdict) = ran.expect("checked above");
        self.ledger.record_done(&job.key, &t, verdict.clone())?;
        Ok(Ok((t, verdict)))
    }
}

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub runs_root: PathBuf,
    pub run_id: String,
    pub concurrency: usize,
    pub ctx: RunContext,
    pub allow_unblocked: bool,
    /// Start at most this many new episodes, then stop as if killed.
    pub stop_after: Option<usize>,
}

impl EvalOptions {
    pub fn new(runs_root: impl Into<PathBuf>, run_id: impl Into<String>, ctx: RunContext) -> Self {
        Self {
            runs_root: runs_root.into(),
            run_id: run_id.into(),
            concurrency: DEFAULT_CONCURRENCY,
            ctx,
            allow_unblocked: false,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionOutcome {
    pub status: JobStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub termination: Option<Termination>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub verdict: Option<ShortFormVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reward: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub run_id: String,
    pub scoring: Scoring,
    pub questions: usize,
    pub done: usize,
    pub failed: usize,
    pub pending: usize,
    /// Share of all questions judged consistent (short-form only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pass_at_1: Option<f64>,
    /// Mean reward over done questions.
    pub mean_reward: f64,
    pub outcomes: BTreeMap<String, QuestionOutcome>,
    pub stats: BehaviorStats,
}

impl EvalReport {
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 || self.pending > 0 {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

fn answer_of(t: &Trajectory) -> &str {
    t.final_answer.as_deref().unwrap_or_default()
}

fn short_form_scorer<'a>(judge: Option<&'a dyn Judge>) -> impl Fn(&Trajectory) -> Scored + Sync + 'a {
    move |t: &Trajectory| match &t.question.gold {
        Some(Gold::Answer(gold)) => {
            let v = judge_short_form(&t.question.text, answer_of(t), gold, judge);
            Scored { reward: Some(v.reward()), verdict: Some(v) }
        }
        _ => Scored::default(),
    }
}

fn report_is_valid(t: &Trajectory) -> bool {
    t.termination == Some(Termination::Answered) && !answer_of(t).trim().is_empty()
}

/// Runs every question once and scores it. Per-question failures are
/// recorded in the ledger and never abort the run.
pub fn run_eval(
    task: &EvalTask,
    factory: &dyn PolicyFactory,
    tools: &dyn ToolExecutor,
    judge: Option<&dyn Judge>,
    opts: &EvalOptions,
) -> Result<EvalReport, HarnessError> {
    if !tools.blocklist_active() && !opts.allow_unblocked {
        return Err(HarnessError::Unblocked);
    }
    if task.scoring == Scoring::LongForm && judge.is_none() {
        return Err(HarnessError::Config("long-form evaluation needs a judge endpoint".into()));
    }
    let ledger = RunLedger::open(&opts.runs_root, &opts.run_id)?;
    let budget = opts.stop_after.map(AtomicUsize::new);
    let runner = Runner { factory, tools, ledger: &ledger, concurrency: opts.concurrency, budget: budget.as_ref() };
    let jobs = task
        .questions
        .iter()
        .map(|q| Job { key: q.id.clone(), sample: 0, prefix_len: 0, start: Episode::new(q.clone(), opts.ctx.clone()) })
        .collect();

    let short = short_form_scorer(judge);
    let long = |t: &Trajectory| -> Scored {
        let (Some(Gold::Rubric(rubric)), Some(judge)) = (&t.question.gold, judge) else { return Scored::default() };
        let report = if report_is_valid(t) { answer_of(t) } else { "" };
        Scored { reward: Some(score_report(report, rubric, judge).weighted()), verdict: None }
    };
    let outcomes = match task.scoring {
        Scoring::ShortForm => runner.run(jobs, &short)?,
        Scoring::LongForm => runner.run(jobs, &long)?,
    };

    let mut report_outcomes = BTreeMap::new();
    for q in &task.questions {
        let outcome = if let Some((t, verdict)) = outcomes.done.get(&q.id) {
            QuestionOutcome {
                status: JobStatus::Done,
                termination: t.termination,
                answer: t.final_answer.clone(),
                verdict: verdict.clone(),
                reward: t.reward,
                error: None,
            }
        } else {
            let error = outcomes.failed.get(&q.id).cloned();
            QuestionOutcome {
                status: if error.is_some() { JobStatus::Failed } else { JobStatus::Pending },
                termination: None,
                answer: None,
                verdict: None,
                reward: None,
                error,
            }
        };
        report_outcomes.insert(q.id.clone(), outcome);
    }
    let n = task.questions.len();
    let done = outcomes.done.len();
    let rewards: Vec<f64> = outcomes.done.values().filter_map(|(t, _)| t.reward).collect();
    let consistent = outcomes.done.values().filter(|(_, v)| v.as_ref().is_some_and(|v| v.consistent)).count();
    Ok(EvalReport {
        run_id: opts.run_id.clone(),
        scoring: task.scoring,
        questions: n,
        done,
        failed: outcomes.failed.len(),
        pending: outcomes.pending,
        pass_at_1: (task.scoring == Scoring::ShortForm).then(|| if n == 0 { 0.0 } else { consistent as f64 / n as f64 }),
        mean_reward: if rewards.is_empty() { 0.0 } else { rewards.iter().sum::<f64>() / rewards.len() as f64 },
        outcomes: report_outcomes,
        stats: BehaviorStats::from_trajectories(outcomes.done.values().map(|(t, _)| t)),
    })
}

#[derive(Debug, Clone)]
pub struct RolloutOptions {
    pub runs_root: PathBuf,
    pub run_id: String,
    pub iteration: usize,
    pub group_size: usize,
    pub filter: FilterPolicy,
    pub eps: f64,
    pub seed: u64,
    pub mix: f64,
    pub partial_rollouts: bool,
    pub concurrency: usize,
    pub ctx: RunContext,
    pub stop_after: Option<usize>,
}

impl RolloutOptions {
    pub fn new(runs_root: impl Into<PathBuf>, run_id: impl Into<String>, group_size: usize, ctx: RunContext) -> Self {
        Self {
            runs_root: runs_root.into(),
            run_id: run_id.into(),
            iteration: 0,
            group_size,
            filter: FilterPolicy::default(),
            eps: DEFAULT_ADVANTAGE_EPS,
            seed: 0,
            mix: DEFAULT_MIX,
            partial_rollouts: false,
            concurrency: DEFAULT_CONCURRENCY,
            ctx,
            stop_after: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutReport {
    pub run_id: String,
    pub iteration: usize,
    /// Trajectories sampled from the questions themselves.
    pub trajectories: usize,
    /// Trajectories continued from partial seeds.
    pub partial_trajectories: usize,
    pub groups: usize,
    /// Groups left out because a member failed.
    pub incomplete_groups: usize,
    pub failed: usize,
    pub pending: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub metadata: Option<BatchMetadata>,
    pub stats: BehaviorStats,
}

impl RolloutReport {
    pub fn exit_code(&self) -> i32 {
        if self.failed > 0 || self.pending > 0 || self.incomplete_groups > 0 {
            EXIT_PARTIAL
        } else {
            EXIT_OK
        }
    }
}

/// A group of job keys sharing one start state.
struct PlannedGroup {
    seed_id: String,
    prefix_len: usize,
    keys: Vec<String>,
}

/// Scores long-form groups: rubric per report, then ranking within the
/// group once every report is scored.
fn reward_long_form(trajs: &mut [Trajectory], judge: &dyn Judge, mix: f64) {
    let valid: Vec<bool> = trajs.iter().map(report_is_valid).collect();
    let reports: Vec<String> =
        trajs.iter().zip(&valid).map(|(t, v)| if *v { answer_of(t).to_string() } else { String::new() }).collect();
    let rubric_scores: Vec<_> = trajs
        .iter()
        .zip(&reports)
        .map(|(t, r)| match &t.question.gold {
            Some(Gold::Rubric(spec)) => score_report(r, spec, judge),
            _ => score_report("", &Default::default(), judge),
        })
        .collect();
    let ranking = rank_reports(&reports, &valid, judge);
    for ((t, s), r) in trajs.iter_mut().zip(&rubric_scores).zip(&ranking.scores) {
        t.reward = Some(total_reward(s, r, mix));
    }
}

/// Samples `G` episodes per question (and per partial seed, if enabled),
/// rewards them, and exports the filtered, advantage-weighted batch to
/// `{runs_root}/{run_id}/{iteration}/batch.jsonl`.
pub fn collect_rollouts(
    task: &EvalTask,
    factory: &dyn PolicyFactory,
    tools: &dyn ToolExecutor,
    judge: Option<&dyn Judge>,
    opts: &RolloutOptions,
) -> Result<RolloutReport, HarnessError> {
    if opts.group_size < 2 {
        return Err(HarnessError::Config(format!("group size must be at least 2, got {}", opts.group_size)));
    }
    opts.filter.validate()?;
    if task.scoring == Scoring::LongForm && judge.is_none() {
        return Err(HarnessError::Config("long-form rewards need a judge endpoint".into()));
    }
    let ledger = RunLedger::open(&opts.runs_root, &opts.run_id)?;
    let budget = opts.stop_after.map(AtomicUsize::new);
    let runner = Runner { factory, tools, ledger: &ledger, concurrency: opts.concurrency, budget: budget.as_ref() };
    let short = short_form_scorer(judge);
    let none = |_: &Trajectory| Scored::default();
    let scorer: &(dyn Fn(&Trajectory) -> Scored + Sync) = match task.scoring {
        Scoring::ShortForm => &short,
        Scoring::LongForm => &none,
    };

    let mut plans = Vec::new();
    let mut jobs = Vec::new();
    for q in &task.questions {
        let start = Episode::new(q.clone(), opts.ctx.clone());
        let keys: Vec<String> = (0..opts.group_size).map(|i| format!("{}#{i}", q.id)).collect();
        for (i, key) in keys.iter().enumerate() {
            jobs.push(Job { key: key.clone(), sample: i, prefix_len: 0, start: start.clone() });
        }
        plans.push(PlannedGroup { seed_id: q.id.clone(), prefix_len: 0, keys });
    }
    let mut outcomes = runner.run(jobs, scorer)?;
    let trajectories = plans.iter().flat_map(|p| &p.keys).filter(|k| outcomes.done.contains_key(*k)).count();

    let mut partial_trajectories = 0;
    if opts.partial_rollouts && outcomes.pending == 0 {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut seed_jobs = Vec::new();
        let mut seed_plans = Vec::new();
        for plan in &plans {
            for key in &plan.keys {
                let Some((t, _)) = outcomes.done.get(key) else { continue };
                let cuts = select_cut_points(t, MAX_SEEDS_PER_ORIGIN, &mut rng);
                for seed in spawn_partial_seeds(t, &cuts, &opts.ctx)? {
                    let seed_id = format!("{key}@{}", seed.prefix_len);
                    let keys: Vec<String> = (0..opts.group_size).map(|j| format!("{seed_id}#{j}")).collect();
                    for (j, k) in keys.iter().enumerate() {
                        seed_jobs.push(Job { key: k.clone(), sample: j, prefix_len: seed.prefix_len, start: seed.start() });
                    }
                    seed_plans.push(PlannedGroup { seed_id, prefix_len: seed.prefix_len, keys });
                }
            }
        }
        let seeded = runner.run(seed_jobs, scorer)?;
        partial_trajectories = seeded.done.len();
        outcomes.pending += seeded.pending;
        outcomes.failed.extend(seeded.failed);
        outcomes.done.extend(seeded.done);
        plans.extend(seed_plans);
    }

    let mut report = RolloutReport {
        run_id: opts.run_id.clone(),
        iteration: opts.iteration,
        trajectories,
        partial_trajectories,
        groups: 0,
        incomplete_groups: 0,
        failed: outcomes.failed.len(),
        pending: outcomes.pending,
        batch_path: None,
        metadata: None,
        stats: BehaviorStats::from_trajectories(outcomes.done.values().map(|(t, _)| t)),
    };
    if outcomes.pending > 0 {
        return Ok(report);
    }

    let mut groups = Vec::new();
    for plan in &plans {
        let Some(mut trajs) =
            plan.keys.iter().map(|k| outcomes.done.get(k).map(|(t, _)| t.clone())).collect::<Option<Vec<_>>>()
        else {
            report.incomplete_groups += 1;
            continue;
        };
        if let (Scoring::LongForm, Some(judge)) = (task.scoring, judge) {
            reward_long_form(&mut trajs, judge, opts.mix);
        }
        let rollouts = trajs
            .into_iter()
            .map(|t| AgentRollout::continued(t, plan.prefix_len, &opts.ctx))
            .collect::<Result<Vec<_>, _>>()?;
        groups.push(RolloutGroup::new(plan.seed_id.clone(), rollouts));
    }
    report.groups = groups.len();
    let batch = assemble_batch(groups, &opts.filter, opts.eps, opts.seed)?;
    let dir = TrainingBatch::export_dir(&opts.runs_root, &opts.run_id, opts.iteration);
    report.batch_path = Some(batch.write_to(&dir).map_err(|e| HarnessError::io(&dir, e))?);
    report.metadata = Some(batch.metadata);
    Ok(report)
}
