mod common;

use proptest::prelude::*;
use serde_json::json;

use common::SizedTools;
use sfr_core::agent::{
    replay, run_episode, AgentAction, ChatMessage, Episode, NextDirective, Prompt, RunContext, StepMeta, Termination,
};
use sfr_core::memory::{ContextBudget, EntryKind, MEMORY_OVERFLOW};
use sfr_core::policy::{parse_action, serialize_action, PolicyProfile, ScriptedPolicy};
use sfr_core::tokens::{CharProxyCounter, TokenCounter};
use sfr_core::toolbox::{ToolExecutor, ToolResult};

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
        6 => (1usize..6000).prop_map(Item::Search),
        2 => (1usize..3000).prop_map(Item::Clean),
        1 => (0usize..12, 0usize..400).prop_map(|(i, n)| Item::Edit(i, n)),
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
        Item::Garbage => return format!("<think>THOUGHT-{i}</think>I am not sure what to do"),
        Item::Unknown => AgentAction::tool("fly_to_moon", json!({})),
    };
    format!("<think>THOUGHT-{i}</think>{}", serialize_action(profile, &action))
}

fn script(profile: &PolicyProfile, items: &[Item]) -> Vec<String> {
    items.iter().enumerate().map(|(i, it)| render_item(profile, i, it)).collect()
}

fn ctx(profile: PolicyProfile, budget: ContextBudget) -> RunContext {
    RunContext::new(profile).with_context(budget).with_max_steps(200)
}

fn recount(p: &Prompt) -> usize {
    Prompt::count_tokens(&p.messages, &CharProxyCounter)
}

/// Steps an episode by hand so memory can be inspected between actions.
fn step_through(ctx: &RunContext, responses: &[String], mut on_step: impl FnMut(&Episode, &Episode)) -> Episode {
    let tools = SizedTools::default();
    let q = common::short_q("q", "What is the answer?", "42");
    let mut ep = Episode::new(q, ctx.clone());
    for r in responses {
        if ep.is_terminated() {
            break;
        }
        let before = ep.clone();
        let parsed = parse_action(&ctx.profile, r);
        match ep.apply_action(r.clone(), parsed.action, StepMeta::default()) {
            NextDirective::ExecuteTool { name, args } => ep.record_tool_result(tools.execute(&name, &args).unwrap()),
            NextDirective::FaultProtocol { .. } => ep.inject_error("Syntax error: malformed response"),
            NextDirective::Continue | NextDirective::Done(_) => {}
        }
        on_step(&before, &ep);
    }
    ep
}

fn tiny_budget() -> impl Strategy<Value = ContextBudget> {
    (200usize..1200, 64usize..256).prop_map(|(mem, reserve)| ContextBudget::new(mem + reserve + 400, mem, reserve).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prompts_never_exceed_l_single_turn(items in prop::collection::vec(item(), 1..60), budget in tiny_budget()) {
        let profile = PolicyProfile::single_turn();
        let ctx = ctx(profile.clone(), budget);
        let mut policy = ScriptedPolicy::new(script(&profile, &items));
        let t = run_episode(common::short_q("q", "What is the answer?", "42"), &mut policy, &SizedTools::default(), &ctx);
        prop_assert_ne!(t.termination, Some(Termination::ContextTruncated));
        for (i, p) in policy.prompts().iter().enumerate() {
            prop_assert!(p.token_count <= budget.total, "prompt {} has {} tokens > L={}", i, p.token_count, budget.total);
            prop_assert_eq!(p.token_count, recount(p));
            prop_assert_eq!(p.user_segments(), 1);
            let text = p.text();
            prop_assert!(!text.contains("THOUGHT-"), "thinking leaked into prompt {}", i);
        }
    }

    #[test]
    fn prompts_never_exceed_l_multi_turn(items in prop::collection::vec(item(), 1..60), budget in tiny_budget()) {
        let profile = PolicyProfile::multi_turn();
        let ctx = ctx(profile.clone(), budget);
        let mut policy = ScriptedPolicy::new(script(&profile, &items)).with_grammar(profile.tool_grammar);
        let t = run_episode(common::short_q("q", "What is the answer?", "42"), &mut policy, &SizedTools::default(), &ctx);
        prop_assert_ne!(t.termination, Some(Termination::ContextTruncated));
        for p in policy.prompts() {
            prop_assert!(p.token_count <= budget.total);
            prop_assert!(!p.text().contains("THOUGHT-"));
        }
    }

    #[test]
    fn lockout_and_cleanup_invariants(items in prop::collection::vec(item(), 1..80), multi in any::<bool>()) {
        let profile = if multi { PolicyProfile::multi_turn() } else { PolicyProfile::single_turn() };
        let ctx = ctx(profile.clone(), ContextBudget::default());
        let responses = script(&profile, &items);
        let mut last_k = 0;
        let ep = step_through(&ctx, &responses, |before, after| {
            let step = after.trajectory.steps.last().unwrap();
            let k = after.memory.cleanup_count();
            assert!(k >= last_k, "K decreased");
            last_k = k;
            if before.memory.is_overflowing() {
                let is_memory_tool = match &step.action {
                    AgentAction::CleanMemory { .. } | AgentAction::FinalAnswer { .. } => true,
                    AgentAction::ToolCall { name, .. } => name == "edit_memory" || name == "delete_memory",
                    AgentAction::Malformed { .. } => false,
                };
                if !is_memory_tool {
                    assert_eq!(step.tool_result, Some(ToolResult::Error { message: MEMORY_OVERFLOW.into() }));
                    assert_eq!(before.memory.entries(), after.memory.entries(), "buffer changed under lockout");
                }
            }
            if let Some(c) = after.memory.latest_cleanup_step() {
                for e in after.memory.entries() {
                    if matches!(e.kind, EntryKind::ToolCallRecord | EntryKind::ToolResultRecord) {
                        assert!(e.step > c, "record from step {} predates cleanup at step {}", e.step, c);
                    }
                }
            }
            assert_eq!(after.memory.total(), after.memory.recompute_total());
        });

        let replayed = replay(&ep.trajectory, ep.trajectory.len(), &ctx).unwrap();
        prop_assert_eq!(&replayed.trajectory, &ep.trajectory);
        prop_assert_eq!(&replayed.memory, &ep.memory);
        for s in &ep.trajectory.steps {
            prop_assert_eq!(s.response_token_count, s.model_response.chars().count().div_ceil(4));
        }
    }
}

#[test]
fn overflow_then_cleanup_restores_tool_access() {
    let profile = PolicyProfile::single_turn();
    let ctx = ctx(profile.clone(), ContextBudget::default());
    let responses = script(&profile, &[Item::Search(6000), Item::Search(6000), Item::Search(10), Item::Clean(100), Item::Search(10)]);
    let ep = step_through(&ctx, &responses, |_, _| {});
    let results: Vec<_> = ep.trajectory.steps.iter().map(|s| s.tool_result.clone().unwrap()).collect();
    assert!(matches!(results[0], ToolResult::Search { .. }));
    assert!(matches!(results[1], ToolResult::Search { .. }));
    assert_eq!(results[2], ToolResult::Error { message: MEMORY_OVERFLOW.into() });
    assert!(matches!(results[3], ToolResult::Notice { .. }));
    assert!(matches!(results[4], ToolResult::Search { .. }));
    assert_eq!(ep.memory.cleanup_count(), 1);
}

#[test]
fn replayed_prefix_matches_live_prompt() {
    let profile = PolicyProfile::single_turn();
    let ctx = ctx(profile.clone(), ContextBudget::default());
    let items = [Item::Search(100), Item::Garbage, Item::Search(3000), Item::Clean(50), Item::Search(20)];
    let mut policy = ScriptedPolicy::new(script(&profile, &items));
    let t = run_episode(common::short_q("q", "What is the answer?", "42"), &mut policy, &SizedTools::default(), &ctx);
    for p in 0..t.len() {
        let ep = replay(&t, p, &ctx).unwrap();
        let rendered: Vec<ChatMessage> = ep.render().unwrap().messages;
        let live = &policy.prompts()[p + t.steps[..p].iter().map(|s| s.retries).sum::<usize>()];
        assert_eq!(&rendered, &live.messages, "prefix {p}");
    }
}

#[test]
fn token_counts_use_the_character_proxy() {
    assert_eq!(CharProxyCounter.count(""), 0);
    assert_eq!(CharProxyCounter.count("abcde"), 2);
}
