mod common;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use regex::Regex;
use serde_json::json;

use common::{answer, browse, search, short_q, SizedTools};
use sfr_core::agent::{
    fault_protocol, run_episode, AgentAction, Episode, FaultCaps, NextDirective, Resolution, RunContext, StepMeta,
    Termination, Trajectory,
};
use sfr_core::harness::{run_eval, EvalOptions, EvalReport, EvalTask, PolicyRequest};
use sfr_core::memory::{ContextBudget, EntryKind, MEMORY_OVERFLOW};
use sfr_core::policy::{parse_action, serialize_action, Policy, PolicyProfile, ScriptedPolicy};
use sfr_core::rl::{
    assemble_batch, compute_advantages, filter_trajectories, AgentRollout, DropStrategy, FilterPolicy, RolloutGroup,
    ScoredRollout, DEFAULT_ADVANTAGE_EPS,
};
use sfr_core::tokens::CharProxyCounter;
use sfr_core::toolbox::{
    html_to_markdown, paginate, ExecOutcome, FixtureFetcher, SandboxConfig, StubSearch, ToolCache, ToolExecutor,
    ToolResult, Toolbox, BLOCKED_MODULES, UNAVAILABLE,
};
use sfr_core::toysim::{random_records, train_toy, SoftmaxPolicy, ToyEnv, ToyTrainConfig};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn prop<S: Strategy>(cases: u32, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> Result<(), String> {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    let mut runner = TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha));
    runner.run(&strategy, test).map_err(|e| e.to_string())
}

// Group advantage

fn oracle(rewards: &[f64], lengths: &[usize], eps: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().fold(0.0, |a, r| a + r) / g;
    let std = (rewards.iter().fold(0.0, |a, r| a + (r - mean) * (r - mean)) / g).sqrt();
    let same = rewards.iter().all(|r| *r == rewards[0]);
    rewards.iter().zip(lengths).map(|(r, t)| if same { 0.0 } else { (r - mean) / ((std + eps) * *t as f64) }).collect()
}

fn per_trajectory(rewards: &[f64], lengths: &[usize]) -> Result<Vec<f64>, String> {
    let g = RolloutGroup::new("g", rewards.iter().zip(lengths).map(|(r, t)| ScoredRollout::new(*r, *t)).collect());
    let recs = compute_advantages(&g, DEFAULT_ADVANTAGE_EPS).map_err(|e| e.to_string())?;
    let mut out = vec![f64::NAN; rewards.len()];
    for r in recs {
        out[r.trajectory_index] = r.advantage;
    }
    Ok(out)
}

fn advantage_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let g = rng.random_range(2..=16);
        let binary = rng.random_bool(0.5);
        let rewards: Vec<f64> =
            (0..g).map(|_| if binary { f64::from(rng.random_range(0..2u8)) } else { rng.random::<f64>() }).collect();
        let lengths: Vec<usize> = (0..g).map(|_| rng.random_range(1..=100)).collect();
        let got = per_trajectory(&rewards, &lengths)?;
        for (a, b) in got.iter().zip(oracle(&rewards, &lengths, DEFAULT_ADVANTAGE_EPS)) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure!(worst <= 1e-12, "max oracle deviation {worst:e}");
    let ex = per_trajectory(&[1.0, 0.0, 0.0, 1.0], &[2, 5, 3, 4])?;
    for (a, b) in ex.iter().zip([0.5, -0.2, -1.0 / 3.0, 0.25]) {
        ensure!((a - b).abs() <= 1e-5, "worked example {ex:?}");
    }
    let elapsed = start.elapsed();
    ensure!(elapsed < Duration::from_secs(5), "took {elapsed:?}");
    Ok(format!("1000 groups, max |diff| {worst:.1e}; example {ex:.4?}; {:.2}s", elapsed.as_secs_f64()))
}

// Toy dynamics

fn toy_dynamics() -> Outcome {
    let start = Instant::now();
    let seeds = 5u64;
    let mut sums = BTreeMap::new();
    let mut ordered = 0;
    for seed in 0..seeds {
        let mut finals = Vec::new();
        for on in [false, true] {
            let cfg = ToyTrainConfig { iterations: 200, use_length_norm: on, seed, ..ToyTrainConfig::default() };
            let m = train_toy(&cfg).map_err(|e| e.to_string())?;
            // Initial is the untrained policy; final is the last 10 iterations.
            let (first, last) = (m.history[0], m.window_mean(10, true));
            let e = sums.entry(on).or_insert([0.0; 4]);
            for (s, v) in e.iter_mut().zip([first.mean_length, first.mean_reward, last.mean_length, last.mean_reward]) {
                *s += v / seeds as f64;
            }
            finals.push(last);
        }
        if finals[1].mean_reward > finals[0].mean_reward && finals[1].repetition_rate < finals[0].repetition_rate {
            ordered += 1;
        }
    }
    let [l0_off, r0_off, l1_off, r1_off] = sums[&false];
    let [l0_on, r0_on, l1_on, r1_on] = sums[&true];
    let detail = format!(
        "off: len {l0_off:.2}->{l1_off:.2} reward {r0_off:.3}->{r1_off:.3}; on: len {l0_on:.2}->{l1_on:.2} reward {r0_on:.3}->{r1_on:.3}; ordering {ordered}/{seeds}; {:.1}s",
        start.elapsed().as_secs_f64()
    );
    ensure!(l1_off >= 2.0 * l0_off, "off length growth below 2x: {detail}");
    ensure!(r1_off <= r0_off, "off reward rose: {detail}");
    ensure!(r1_on > r0_on, "on reward did not rise: {detail}");
    ensure!(l1_on <= 1.5 * l0_on, "on length grew past 1.5x: {detail}");
    ensure!(2 * ordered > seeds as usize, "ordering holds in a minority of seeds: {detail}");
    ensure!(start.elapsed() < Duration::from_secs(600), "too slow: {detail}");
    Ok(detail)
}

// Surrogate gradient

fn set_param(p: &mut SoftmaxPolicy, j: usize, v: f64) {
    let n = p.theta.len();
    if j < n {
        p.set_logit(j / p.num_actions, j % p.num_actions, v);
    } else {
        p.set_shared(j - n, v);
    }
}

fn gradient_check() -> Outcome {
    let env = ToyEnv::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-5;
    let (mut worst, mut done) = (0.0f64, 0);
    while done < 50 {
        let mut policy = SoftmaxPolicy::with_prior(&env, 3.0, 0.0);
        for j in 0..policy.params().len() {
            let v = policy.params()[j] + rng.random_range(-1.0..1.0);
            set_param(&mut policy, j, v);
        }
        let records = random_records(&policy, rng.random_range(1..40), &mut rng);
        let eps = rng.random_range(0.1..0.3);
        let near_kink = records.iter().any(|r| {
            let rho = (policy.log_prob(r.state, r.action) - r.old_logprob).exp();
            (rho - (1.0 - eps)).abs() < 1e-3 || (rho - (1.0 + eps)).abs() < 1e-3
        });
        let analytic = policy.surrogate_gradient(&records, eps).map_err(|e| e.to_string())?;
        let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if near_kink || norm(&analytic) < 1e-8 {
            continue;
        }
        let base = policy.params();
        let numeric: Vec<f64> = (0..base.len())
            .map(|j| {
                let mut p = policy.clone();
                set_param(&mut p, j, base[j] + h);
                let up = p.surrogate_loss(&records, eps).unwrap();
                set_param(&mut p, j, base[j] - h);
                let down = p.surrogate_loss(&records, eps).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric));
        worst = worst.max(rel);
        done += 1;
    }
    ensure!(worst <= 1e-5, "max relative error {worst:e}");
    Ok(format!("50 configurations, max relative error {worst:.1e}"))
}

// Memory protocol

#[derive(Debug, Clone)]
enum Item {
    Search(usize),
    Clean(usize),
    Edit(usize, usize),
    Delete(usize),
    Garbage,
    Unknown,
}

fn item() -> impl Strategy<Value = Item> {
    prop_oneof![
        6 => (1usize..12_000).prop_map(Item::Search),
        2 => (1usize..6_000).prop_map(Item::Clean),
        1 => (0usize..12, 0usize..2_000).prop_map(|(i, n)| Item::Edit(i, n)),
        1 => (0usize..12).prop_map(Item::Delete),
        1 => Just(Item::Garbage),
        1 => Just(Item::Unknown),
    ]
}

fn render_item(profile: &PolicyProfile, i: usize, item: &Item) -> String {
    let action = match item {
        Item::Search(n) => AgentAction::tool("search_internet", json!({ "query": format!("probe {i} {n}") })),
        Item::Clean(n) => AgentAction::CleanMemory { content: format!("summary {i} {}", "s".repeat(*n)) },
        Item::Edit(idx, n) => AgentAction::tool("edit_memory", json!({ "index": idx, "content": "e".repeat(*n) })),
        Item::Delete(idx) => AgentAction::tool("delete_memory", json!({ "index": idx })),
        Item::Garbage => return format!("<think>T{i}</think>no idea"),
        Item::Unknown => AgentAction::tool("fly_to_moon", json!({})),
    };
    format!("<think>T{i}</think>{}", serialize_action(profile, &action))
}

fn is_cleanup_action(a: &AgentAction) -> bool {
    match a {
        AgentAction::CleanMemory { .. } | AgentAction::FinalAnswer { .. } => true,
        AgentAction::ToolCall { name, .. } => name == "edit_memory" || name == "delete_memory",
        AgentAction::Malformed { .. } => false,
    }
}

fn adversarial_episode(profile: &PolicyProfile, items: &[Item]) -> Result<(usize, usize), TestCaseError> {
    let budget = ContextBudget::default();
    let ctx = RunContext::new(profile.clone()).with_context(budget).with_max_steps(200);
    let tools = SizedTools::default();
    let mut ep = Episode::new(short_q("q", "What is the answer?", "42"), ctx.clone());
    let (mut prompts, mut lockouts) = (0, 0);
    for (i, it) in items.iter().enumerate() {
        if ep.is_terminated() {
            break;
        }
        let prompt = ep.render().map_err(|e| TestCaseError::fail(e.to_string()))?;
        prop_assert!(prompt.token_count <= budget.total, "prompt of {} tokens", prompt.token_count);
        prompts += 1;
        let raw = render_item(profile, i, it);
        let before = ep.clone();
        let parsed = parse_action(profile, &raw);
        match ep.apply_action(raw, parsed.action, StepMeta::default()) {
            NextDirective::ExecuteTool { name, args } => ep.record_tool_result(tools.execute(&name, &args).unwrap()),
            NextDirective::FaultProtocol { .. } => ep.inject_error("Syntax error: malformed response"),
            NextDirective::Continue | NextDirective::Done(_) => {}
        }
        let step = ep.trajectory.steps.last().unwrap();
        if before.memory.is_overflowing() && !is_cleanup_action(&step.action) {
            lockouts += 1;
            prop_assert_eq!(&step.tool_result, &Some(ToolResult::Error { message: MEMORY_OVERFLOW.into() }));
            prop_assert!(MEMORY_OVERFLOW.starts_with("memory overflow"));
            prop_assert_eq!(before.memory.entries(), ep.memory.entries());
        }
        if let Some(c) = ep.memory.latest_cleanup_step() {
            for e in ep.memory.entries() {
                if matches!(e.kind, EntryKind::ToolCallRecord | EntryKind::ToolResultRecord) {
                    prop_assert!(e.step > c, "record from step {} survives cleanup at {}", e.step, c);
                }
            }
        }
    }
    Ok((prompts, lockouts))
}

fn memory_protocol() -> Outcome {
    let prompts = AtomicUsize::new(0);
    let lockouts = AtomicUsize::new(0);
    let strategy = (prop::collection::vec(item(), 1..80), any::<bool>());
    prop(256, strategy, |(items, multi)| {
        let profile = if multi { PolicyProfile::multi_turn() } else { PolicyProfile::single_turn() };
        let (p, l) = adversarial_episode(&profile, &items)?;
        prompts.fetch_add(p, Ordering::Relaxed);
        lockouts.fetch_add(l, Ordering::Relaxed);
        Ok(())
    })?;
    let (p, l) = (prompts.into_inner(), lockouts.into_inner());
    ensure!(l > 0, "no episode exercised the overflow lockout");
    Ok(format!("256/256 episodes; {p} prompts within L=4096; {l} locked-out actions refused"))
}

// Toolbox

fn url_constructs(text: &str) -> usize {
    let detector = Regex::new(
        r#"(?i)([a-z][a-z0-9+.-]*://|\bwww\.|mailto:|\]\(|\]\[|^\s*\[[^\]]+\]:|<a\b|href\s*=|src\s*=|action\s*=)"#,
    )
    .unwrap();
    text.lines().map(|l| detector.find_iter(l).count()).sum()
}

fn toolbox_suite() -> Outcome {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/pages");
    let mut pages = 0;
    for entry in std::fs::read_dir(&dir).map_err(|e| e.to_string())? {
        let path = entry.map_err(|e| e.to_string())?.path();
        let md = html_to_markdown(&std::fs::read_to_string(&path).map_err(|e| e.to_string())?);
        ensure!(url_constructs(&md) == 0, "{} keeps URL constructs", path.display());
        pages += 1;
    }

    let text = prop::collection::vec(
        prop_oneof![3 => "[A-Za-z ]{1,80}", 1 => Just("\n".to_string()), 1 => Just("\n\n".to_string()), 1 => "[a-z]{200,400}"],
        0..60,
    )
    .prop_map(|v| v.concat());
    prop(256, (text, 1usize..300), |(md, limit)| {
        prop_assert_eq!(paginate(&md, limit, &CharProxyCounter).concat(), md);
        Ok(())
    })?;

    let listed = ["os", "sys", "subprocess", "socket", "signal", "multiprocessing", "threading", "ssl", "pdb", "resource", "xmlrpc"];
    ensure!(listed.iter().all(|m| BLOCKED_MODULES.contains(m)), "block list incomplete");
    let sandbox = common::test_sandbox(Duration::from_secs(10));
    for m in BLOCKED_MODULES {
        for code in [format!("import {m}"), format!("from {m} import *"), format!("__import__('{m}')")] {
            let r = sandbox.run(&code).map_err(|e| e.to_string())?;
            ensure!(r.outcome == ExecOutcome::BlockedImport { module: m.to_string() }, "{code}: {r:?}");
        }
    }
    sandbox.run("x = 5").map_err(|e| e.to_string())?;
    let r = sandbox.run("print(x)").map_err(|e| e.to_string())?;
    ensure!(r.outcome == ExecOutcome::Error && r.stderr.contains("NameError"), "state leaked: {r:?}");
    ensure!(SandboxConfig::default().timeout == Duration::from_secs(300), "default timeout is not 300 s");
    let short = common::test_sandbox(Duration::from_secs(2));
    let t0 = Instant::now();
    let r = short.run("while True:\n    pass").map_err(|e| e.to_string())?;
    let took = t0.elapsed();
    ensure!(r.outcome == ExecOutcome::Timeout && took < Duration::from_secs(6), "timeout not enforced: {took:?}");

    let fx = common::fixture_toolbox();
    for url in ["https://leak.example/answers", "https://sub.leak.example/x"] {
        let r = fx.toolbox.browse_page(url, 0);
        ensure!(r.observation() == UNAVAILABLE && UNAVAILABLE == "Unavailable", "{url}: {r:?}");
    }
    ensure!(fx.fetcher.calls() == 0, "blocked page fetched");

    let provider = Arc::new(StubSearch::new().with("rust", &[("https://rust.example/", "Rust")]));
    let toolbox = Toolbox::new(provider.clone(), Arc::new(FixtureFetcher::new()), common::test_sandbox(Duration::from_secs(5)))
        .with_cache(ToolCache::in_memory());
    for _ in 0..3 {
        toolbox.execute("search_internet", &common::args(json!({ "query": "rust" }))).map_err(|e| e.to_string())?;
    }
    ensure!(provider.calls() == 1, "provider called {} times", provider.calls());
    Ok(format!(
        "{pages} pages link-free; 256 partitions exact; {} modules blocked; stateless; 2 s timeout in {:.1}s; Unavailable; 1 provider call",
        BLOCKED_MODULES.len(),
        took.as_secs_f64()
    ))
}

// Filtering

fn ctx() -> RunContext {
    RunContext::new(common::profile())
}

#[derive(Debug, Clone, Copy)]
enum Fate {
    Right(usize),
    Wrong(usize),
    Garbage,
    Runaway,
}

fn fate() -> impl Strategy<Value = Fate> {
    prop_oneof![
        3 => (0usize..4).prop_map(Fate::Right),
        3 => (0usize..4).prop_map(Fate::Wrong),
        1 => Just(Fate::Garbage),
        1 => Just(Fate::Runaway),
    ]
}

fn trajectory_for(f: Fate) -> Trajectory {
    let (script, reward) = match f {
        Fate::Right(k) => ((0..k).map(|i| search(&format!("s{i} 20"))).chain([answer("42")]).collect(), 1.0),
        Fate::Wrong(k) => ((0..k).map(|i| search(&format!("s{i} 20"))).chain([answer("41")]).collect(), 0.0),
        Fate::Garbage => (vec!["garbage".to_string(); 32], 1.0),
        Fate::Runaway => ((0..32).map(|i| search(&format!("r{i} 20"))).collect(), 1.0),
    };
    let mut policy = ScriptedPolicy::new(script);
    let mut t = run_episode(short_q("q", "Q?", "42"), &mut policy, &SizedTools::default(), &ctx().with_max_steps(8));
    t.reward = Some(reward);
    t
}

fn filtering_suite() -> Outcome {
    let checked = AtomicUsize::new(0);
    let strategy = (prop::collection::vec(prop::collection::vec(fate(), 2..9), 1..4), 0.2f64..1.0, 1.0f64..4.0, any::<bool>(), any::<u64>());
    prop(128, strategy, |(groups, low, width, heuristic, seed)| {
        let policy = FilterPolicy {
            band: (low, low * width),
            drop_strategy: if heuristic { DropStrategy::HeuristicShortestFirst } else { DropStrategy::Random },
            ..FilterPolicy::default()
        };
        let built: Vec<(Vec<Trajectory>, RolloutGroup<AgentRollout>)> = groups
            .iter()
            .enumerate()
            .map(|(gi, fates)| {
                let trajs: Vec<Trajectory> = fates.iter().map(|f| trajectory_for(*f)).collect();
                let rollouts = trajs.iter().map(|t| AgentRollout::new(t.clone(), &ctx()).unwrap()).collect();
                (trajs, RolloutGroup::new(format!("g{gi}"), rollouts))
            })
            .collect();
        let input: Vec<RolloutGroup<AgentRollout>> = built.iter().map(|(_, g)| g.clone()).collect();
        let batch = assemble_batch(input.clone(), &policy, DEFAULT_ADVANTAGE_EPS, seed);
        let Ok(batch) = batch else {
            return Ok(());
        };
        for r in &batch.records {
            let (trajs, _) = &built[r.group_id[1..].parse::<usize>().unwrap()];
            let t = &trajs[r.trajectory_index];
            prop_assert!(!t.termination.is_some_and(|t| t.is_invalid()), "invalid trajectory exported: {:?}", t.termination);
        }
        for (_, g) in &built {
            if let Ok(out) = filter_trajectories(g.clone(), &policy, seed) {
                let (p, n) = (out.stats.positives, out.stats.negatives);
                if p > 0 && n > 0 {
                    let ratio = p as f64 / n as f64;
                    prop_assert!(ratio >= policy.band.0 - 1e-12 && ratio <= policy.band.1 + 1e-12, "{}:{} outside {:?}", p, n, policy.band);
                }
                prop_assert_eq!(out.kept, filter_trajectories(g.clone(), &policy, seed).unwrap().kept);
            }
        }
        let again = assemble_batch(input, &policy, DEFAULT_ADVANTAGE_EPS, seed).unwrap();
        prop_assert_eq!(&again.records, &batch.records);
        checked.fetch_add(batch.records.len(), Ordering::Relaxed);
        Ok(())
    })?;
    Ok(format!("128/128 cases; {} exported step records, none invalid", checked.into_inner()))
}

// Fault tolerance

fn fault_action() -> impl Strategy<Value = AgentAction> {
    let word = "[a-zA-Z0-9][a-zA-Z0-9 ]{0,20}[a-zA-Z0-9]";
    prop_oneof![
        word.prop_map(|q| AgentAction::tool("search_internet", json!({ "query": q }))),
        ("[a-z]{1,10}", 0u64..50).prop_map(|(h, s)| AgentAction::tool("browse_page", json!({ "url": format!("https://{h}.example/"), "section_id": s }))),
        word.prop_map(|c| AgentAction::CleanMemory { content: c }),
        word.prop_map(AgentAction::answer),
    ]
}

fn corrupt(profile: &PolicyProfile, a: &AgentAction, kind: u8) -> Option<String> {
    let text = serialize_action(profile, a);
    let close = if matches!(a, AgentAction::FinalAnswer { .. }) { "</answer>" } else { "</tool_call>" };
    let body = text.strip_suffix(close)?;
    Some(match kind {
        0 => format!("{text}\nI hope this helps."),
        1 => {
            let q = body.rfind('"')?;
            format!("{}{close}{}", &body[..q], &body[q..])
        }
        2 => body.to_string(),
        3 => format!("{text}{close}"),
        _ => {
            let AgentAction::ToolCall { name, args } = a else { return None };
            let mut args = args.clone();
            let n = args.get("section_id")?.as_u64()?;
            args.insert("section_id".into(), json!(n.to_string()));
            serialize_action(profile, &AgentAction::ToolCall { name: name.clone(), args })
        }
    })
}

fn fault_tolerance_suite() -> Outcome {
    let profile = PolicyProfile::single_turn();
    let repaired = AtomicUsize::new(0);
    prop(512, (fault_action(), 0u8..5), |(a, kind)| {
        let Some(raw) = corrupt(&profile, &a, kind) else { return Ok(()) };
        let parsed = parse_action(&profile, &raw);
        let AgentAction::Malformed { diagnosis, .. } = &parsed.action else {
            return Err(TestCaseError::fail(format!("corruption parsed cleanly: {raw}")));
        };
        let r = fault_protocol(&profile, &raw, diagnosis, 0, FaultCaps::default()).unwrap();
        prop_assert_eq!(r, Resolution::Repaired(a.clone(), diagnosis.clone()));
        repaired.fetch_add(1, Ordering::Relaxed);
        Ok(())
    })?;

    let script = vec![
        common::tool("wikipedia_lookup", json!({ "title": "Paris" })),
        common::tool("browse_page", json!({ "url": "https://a.example/" })),
        answer("Paris"),
    ];
    let t = run_episode(short_q("q", "Capital?", "Paris"), &mut ScriptedPolicy::new(script), &SizedTools::default(), &ctx());
    ensure!(t.termination == Some(Termination::Answered), "episode did not continue: {:?}", t.termination);
    let obs: Vec<String> = t.steps[..2].iter().map(|s| s.tool_result.as_ref().unwrap().observation()).collect();
    ensure!(obs[0].contains("unknown tool") && obs[0].contains("wikipedia_lookup"), "{}", obs[0]);
    ensure!(obs[1].contains("invalid parameters"), "{}", obs[1]);

    let caps = FaultCaps::default();
    let mut failed = run_episode(short_q("q", "Q?", "42"), &mut ScriptedPolicy::new(vec!["garbage"; 32]), &SizedTools::default(), &ctx());
    ensure!(failed.termination == Some(Termination::FormatFailure), "{:?}", failed.termination);
    let attempts: usize = failed.steps.iter().map(|s| 1 + s.retries).sum();
    ensure!(attempts == caps.hard_cap + 1, "{attempts} attempts");
    failed.reward = Some(1.0);
    let mut good = trajectory_for(Fate::Right(1));
    let mut bad = trajectory_for(Fate::Wrong(1));
    good.reward = Some(1.0);
    bad.reward = Some(0.0);
    let group: Vec<AgentRollout> = [good, failed, bad].into_iter().map(|t| AgentRollout::new(t, &ctx()).unwrap()).collect();
    let batch = assemble_batch(vec![RolloutGroup::new("q", group)], &FilterPolicy::default(), DEFAULT_ADVANTAGE_EPS, 3)
        .map_err(|e| e.to_string())?;
    ensure!(batch.records.iter().all(|r| r.trajectory_index != 1), "format failure exported");
    Ok(format!(
        "{} corruptions repaired exactly; unknown-tool and invalid-parameter observations; FormatFailure after {attempts} attempts, excluded",
        repaired.into_inner()
    ))
}

// Harness

fn four_questions() -> EvalTask {
    let qs = vec![
        short_q("q1", "What is the capital of France?", "Paris"),
        short_q("q2", "Which city hosts the Louvre?", "Paris"),
        short_q("q3", "What is 2 + 2?", "4"),
        short_q("q4", "Largest planet?", "Jupiter"),
    ];
    EvalTask::from_questions("four.jsonl", qs).unwrap()
}

fn scripted(req: &PolicyRequest) -> Box<dyn Policy> {
    let script = match req.question.id.as_str() {
        "q1" => vec![search("capital of france"), answer("Paris")],
        "q2" => vec![browse("https://leak.example/answers", 1), answer("Paris")],
        "q3" => vec![answer("4")],
        _ => vec![answer("Saturn")],
    };
    Box::new(ScriptedPolicy::new(script))
}

fn many_policy(req: &PolicyRequest) -> Box<dyn Policy> {
    let i: usize = req.question.id[1..].parse().unwrap();
    let mut script: Vec<String> = (0..i % 4).map(|k| search(&format!("q{i} {}", 10 * (k + 1)))).collect();
    script.push(answer("a0"));
    Box::new(ScriptedPolicy::new(script))
}

fn verdicts(r: &EvalReport) -> BTreeMap<String, Option<bool>> {
    r.outcomes.iter().map(|(k, o)| (k.clone(), o.verdict.as_ref().map(|v| v.consistent))).collect()
}

fn harness_suite() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let fx = common::fixture_toolbox();
    let report = run_eval(&four_questions(), &scripted, &fx.toolbox, None, &EvalOptions::new(dir.path(), "pass", ctx()))
        .map_err(|e| e.to_string())?;
    ensure!(report.pass_at_1 == Some(0.75), "Pass@1 {:?}", report.pass_at_1);

    let qs = (0..12).map(|i| short_q(&format!("m{i:02}"), &format!("Q{i}?"), &format!("a{}", i % 3))).collect();
    let task = EvalTask::from_questions("many.jsonl", qs).unwrap();
    let tools = SizedTools::default();
    let whole = run_eval(&task, &many_policy, &tools, None, &EvalOptions::new(dir.path(), "whole", ctx())).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let kills: Vec<usize> = (0..8).map(|_| rng.random_range(0..12)).collect();
    for (n, &kill) in kills.iter().enumerate() {
        let made = AtomicUsize::new(0);
        let counting = |req: &PolicyRequest| {
            made.fetch_add(1, Ordering::SeqCst);
            many_policy(req)
        };
        let mut opts = EvalOptions::new(dir.path(), format!("kill{n}"), ctx());
        opts.concurrency = 1 + n % 4;
        opts.stop_after = Some(kill);
        let partial = run_eval(&task, &counting, &tools, None, &opts).map_err(|e| e.to_string())?;
        ensure!(partial.done == kill, "kill at {kill} finished {}", partial.done);
        opts.stop_after = None;
        let resumed = run_eval(&task, &counting, &tools, None, &opts).map_err(|e| e.to_string())?;
        ensure!(made.load(Ordering::SeqCst) == 12, "kill at {kill}: {} episodes started", made.load(Ordering::SeqCst));
        ensure!(resumed.outcomes == whole.outcomes && resumed.stats == whole.stats, "kill at {kill}: totals differ");
        ensure!(resumed.pass_at_1 == whole.pass_at_1, "kill at {kill}: Pass@1 differs");
    }

    let mut seen = Vec::new();
    for c in [1, 4] {
        let mut opts = EvalOptions::new(dir.path(), format!("conc{c}"), ctx());
        opts.concurrency = c;
        seen.push(verdicts(&run_eval(&task, &many_policy, &tools, None, &opts).map_err(|e| e.to_string())?));
    }
    ensure!(seen[0] == seen[1], "verdicts depend on concurrency");
    Ok(format!("Pass@1 0.75; resume equal at kill points {kills:?}; concurrency 1 vs 4 equal"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 8] = [
        ("group advantage oracle", advantage_oracle),
        ("toy length-normalization dynamics", toy_dynamics),
        ("clipped surrogate gradient check", gradient_check),
        ("memory protocol suite", memory_protocol),
        ("toolbox suite", toolbox_suite),
        ("filtering suite", filtering_suite),
        ("fault-tolerance suite", fault_tolerance_suite),
        ("harness suite", harness_suite),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match std::panic::catch_unwind(check) {
            Ok(Ok(detail)) => println!("PASS {name}: {detail}"),
            Ok(Err(why)) => {
                failed += 1;
                println!("FAIL {name}: {why}");
            }
            Err(_) => {
                failed += 1;
                println!("FAIL {name}: panicked");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
