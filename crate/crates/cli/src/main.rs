use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use sfr_core::harness::{
    collect_rollouts, compute_stats, run_eval, EvalOptions, EvalTask, HarnessConfig, HarnessError, PolicyRequest,
    RolloutOptions, EXIT_OK,
};
use sfr_core::policy::{ChatClient, Policy, PolicyProfile, API_BASE_ENV, API_KEY_ENV};
use sfr_core::reward::Judge;
use sfr_core::toolbox::{Blocklist, HttpFetcher, Sandbox, SandboxConfig, SerperClient, ToolCache, Toolbox, SERPER_KEY_ENV};
use sfr_core::toysim::{train_toy, ToyTrainConfig};

#[derive(Parser)]
#[command(name = "sfr", version, about = "Deep-research agent runtime and RL recipe tools")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Evaluate a dataset once per question and report Pass@1.
    RunEval(EvalArgs),
    /// Sample groups of rollouts and export a training batch.
    CollectRollouts(RolloutArgs),
    /// Train the toy policy and write per-iteration metrics as CSV.
    TrainToy(ToyArgs),
    /// Summarize trajectory files.
    Stats {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
    /// Tool-result cache maintenance.
    Cache {
        #[command(subcommand)]
        action: CacheAction,
    },
}

#[derive(Subcommand)]
enum CacheAction {
    /// Delete every cached tool result.
    Purge {
        #[arg(long)]
        cache_dir: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// TOML file with [policy], [budgets], [toolbox], [rl] and [reward].
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    run_id: String,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    blocklist: Option<PathBuf>,
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    #[arg(long)]
    section_limit: Option<usize>,
    /// Seconds.
    #[arg(long)]
    exec_timeout: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    allow_unblocked: bool,
}

#[derive(Args)]
struct RolloutArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    group_size: Option<usize>,
    #[arg(long)]
    clip_eps: Option<f64>,
    /// Positive:negative ratio band, as LOW:HIGH.
    #[arg(long, value_parser = parse_band)]
    band: Option<(f64, f64)>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value_t = 0)]
    iteration: usize,
    #[arg(long)]
    partial_rollouts: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum Toggle {
    On,
    Off,
}

#[derive(Args)]
struct ToyArgs {
    #[arg(long, default_value_t = 200)]
    iterations: usize,
    #[arg(long, default_value_t = 8)]
    group_size: usize,
    #[arg(long, value_enum, default_value_t = Toggle::On)]
    length_norm: Toggle,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_band(s: &str) -> Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected LOW:HIGH")?;
    let lo: f64 = lo.trim().parse().map_err(|e| format!("LOW: {e}"))?;
    let hi: f64 = hi.trim().parse().map_err(|e| format!("HIGH: {e}"))?;
    Ok((lo, hi))
}

fn print_json<T: Serialize>(value: &T) {
    match serde_json::to_string_pretty(value) {
        Ok(s) => println!("{s}"),
        Err(e) => log::error!("cannot print report: {e}"),
    }
}

fn load_config(run: &RunArgs) -> Result<HarnessConfig, HarnessError> {
    let mut cfg = match &run.config {
        Some(p) => HarnessConfig::load(p)?,
        None => HarnessConfig::default(),
    };
    let t = &mut cfg.toolbox;
    t.blocklist = run.blocklist.clone().or(t.blocklist.take());
    t.cache_dir = run.cache_dir.clone().or(t.cache_dir.take());
    t.section_limit = run.section_limit.unwrap_or(t.section_limit);
    t.exec_timeout_secs = run.exec_timeout.unwrap_or(t.exec_timeout_secs);
    Ok(cfg)
}

fn build_toolbox(cfg: &HarnessConfig, run_dir: &Path) -> Result<Toolbox, HarnessError> {
    let t = &cfg.toolbox;
    let key = std::env::var(SERPER_KEY_ENV).map_err(|_| HarnessError::Config(format!("{SERPER_KEY_ENV} is not set")))?;
    let search = match &t.search_endpoint {
        Some(url) => SerperClient::with_endpoint(url, key),
        None => SerperClient::new(key),
    };
    let sandbox = Sandbox::new(SandboxConfig { timeout: Duration::from_secs(t.exec_timeout_secs), ..Default::default() })
        .map_err(|e| HarnessError::Config(e.to_string()))?;
    let cache_dir = t.cache_dir.clone().unwrap_or_else(|| run_dir.join("cache"));
    let cache = ToolCache::open(&cache_dir).map_err(|e| HarnessError::io(&cache_dir, e))?;
    let mut toolbox = Toolbox::new(Arc::new(search), Arc::new(HttpFetcher::default()), sandbox)
        .with_cache(cache)
        .with_section_limit(t.section_limit);
    if let Some(path) = &t.blocklist {
        toolbox = toolbox.with_blocklist(Blocklist::load(path).map_err(|e| HarnessError::Config(e.to_string()))?);
    }
    Ok(toolbox)
}

fn api_base(cfg_url: &Option<String>) -> Result<String, HarnessError> {
    cfg_url
        .clone()
        .or_else(|| std::env::var(API_BASE_ENV).ok())
        .ok_or_else(|| HarnessError::Config(format!("set policy.base_url or {API_BASE_ENV}")))
}

fn chat_client(base: String, model: &str, profile: PolicyProfile) -> ChatClient {
    let client = ChatClient::new(base, model, profile);
    match std::env::var(API_KEY_ENV) {
        Ok(key) => client.with_api_key(key),
        Err(_) => client,
    }
}

fn build_policy(cfg: &HarnessConfig) -> Result<ChatClient, HarnessError> {
    Ok(chat_client(api_base(&cfg.policy.base_url)?, &cfg.policy.model, cfg.policy.profile()))
}

fn build_judge(cfg: &HarnessConfig) -> Result<Option<ChatClient>, HarnessError> {
    let r = &cfg.reward;
    if r.judge_base_url.is_none() && r.judge_model.is_none() {
        return Ok(None);
    }
    let base = match &r.judge_base_url {
        Some(u) => u.clone(),
        None => api_base(&cfg.policy.base_url)?,
    };
    let model = r.judge_model.clone().unwrap_or_else(|| cfg.policy.model.clone());
    Ok(Some(chat_client(base, &model, PolicyProfile::single_turn())))
}

fn cmd_eval(args: EvalArgs) -> Result<i32, HarnessError> {
    let mut cfg = load_config(&args.run)?;
    cfg.toolbox.allow_unblocked |= args.allow_unblocked;
    let task = EvalTask::load(&args.run.dataset)?;
    let policy = build_policy(&cfg)?;
    let judge = build_judge(&cfg)?;
    let toolbox = build_toolbox(&cfg, &args.run.runs_dir.join(&args.run.run_id))?;
    let mut opts = EvalOptions::new(&args.run.runs_dir, &args.run.run_id, cfg.run_context()?);
    opts.allow_unblocked = cfg.toolbox.allow_unblocked;
    opts.concurrency = args.run.concurrency.unwrap_or(opts.concurrency);
    let factory = |_: &PolicyRequest| -> Box<dyn Policy> { Box::new(policy.clone()) };
    let report = run_eval(&task, &factory, &toolbox, judge.as_ref().map(|j| j as &dyn Judge), &opts)?;
    print_json(&report);
    Ok(report.exit_code())
}

fn cmd_rollouts(args: RolloutArgs) -> Result<i32, HarnessError> {
    let mut cfg = load_config(&args.run)?;
    let rl = &mut cfg.rl;
    rl.group_size = args.group_size.unwrap_or(rl.group_size);
    rl.clip_eps = args.clip_eps.unwrap_or(rl.clip_eps);
    rl.band = args.band.unwrap_or(rl.band);
    rl.seed = args.seed.unwrap_or(rl.seed);
    rl.partial_rollouts |= args.partial_rollouts;
    cfg.validate()?;
    let task = EvalTask::load(&args.run.dataset)?;
    let policy = build_policy(&cfg)?;
    let judge = build_judge(&cfg)?;
    let toolbox = build_toolbox(&cfg, &args.run.runs_dir.join(&args.run.run_id))?;
    let mut opts = RolloutOptions::new(&args.run.runs_dir, &args.run.run_id, cfg.rl.group_size, cfg.run_context()?);
    opts.iteration = args.iteration;
    opts.filter = cfg.filter_policy();
    opts.eps = cfg.rl.eps;
    opts.seed = cfg.rl.seed;
    opts.mix = cfg.reward.mix;
    opts.partial_rollouts = cfg.rl.partial_rollouts;
    opts.concurrency = args.run.concurrency.unwrap_or(opts.concurrency);
    let factory = |_: &PolicyRequest| -> Box<dyn Policy> { Box::new(policy.clone()) };
    let report = collect_rollouts(&task, &factory, &toolbox, judge.as_ref().map(|j| j as &dyn Judge), &opts)?;
    print_json(&serde_json::json!({ "clip_eps": cfg.rl.clip_eps, "report": report }));
    Ok(report.exit_code())
}

fn cmd_toy(args: ToyArgs) -> Result<i32, HarnessError> {
    if args.group_size < 2 {
        return Err(HarnessError::Config("--group-size must be at least 2".into()));
    }
    let config = ToyTrainConfig {
        iterations: args.iterations,
        group_size: args.group_size,
        use_length_norm: matches!(args.length_norm, Toggle::On),
        seed: args.seed,
        ..Default::default()
    };
    let metrics = train_toy(&config)?;
    let file = File::create(&args.out).map_err(|e| HarnessError::io(&args.out, e))?;
    metrics.write_csv(BufWriter::new(file)).map_err(|e| HarnessError::io(&args.out, e))?;
    let last = metrics.window_mean(20, true);
    println!(
        "final window: mean_length={:.3} mean_reward={:.3} repetition_rate={:.3}",
        last.mean_length, last.mean_reward, last.repetition_rate
    );
    Ok(EXIT_OK)
}

fn run(cli: Cli) -> Result<i32, HarnessError> {
    match cli.command {
        Command::RunEval(a) => cmd_eval(a),
        Command::CollectRollouts(a) => cmd_rollouts(a),
        Command::TrainToy(a) => cmd_toy(a),
        Command::Stats { files } => {
            print_json(&compute_stats(&files)?);
            Ok(EXIT_OK)
        }
        Command::Cache { action: CacheAction::Purge { cache_dir } } => {
            let cache = ToolCache::open(&cache_dir).map_err(|e| HarnessError::io(&cache_dir, e))?;
            let n = cache.len();
            cache.purge().map_err(|e| HarnessError::io(&cache_dir, e))?;
            println!("purged {n} cached results from {}", cache_dir.display());
            Ok(EXIT_OK)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let code = match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    ExitCode::from(code as u8)
}
