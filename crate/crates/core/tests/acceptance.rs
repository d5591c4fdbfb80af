//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Every check runs offline against replayed transcripts, the
//! simulated runtime, or local stub servers.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use common::*;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};
use taskpilot_core::actor::{parse_generated_tool, parse_invocation, parse_verdict, ActorError};
use taskpilot_core::agent::sandbox_keyer;
use taskpilot_core::learning::{propose_curriculum, run_curriculum, LearningObjective};
use taskpilot_core::llm::{
    extract_json, extract_tagged, ChatBackend, ExtractError, Purpose, RecordingBackend, ReplayBackend,
    ScriptedBackend, Transcript,
};
use taskpilot_core::manifest::{replay_manifest, RunManifest};
use taskpilot_core::memory::{gate_persistence, Embedder, HashEmbedder, ToolRecord, ToolRepository};
use taskpilot_core::planner::{parse_plan, PlanError};
use taskpilot_core::runtime::{LocalRuntime, Runtime, RuntimeError};
use taskpilot_core::taskgraph::GraphError;
use taskpilot_core::template::TemplateSet;
use taskpilot_core::{Agent, AgentConfig, AgentError, RunReport, Subtask, SubtaskKind, SubtaskStatus, TaskGraph};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("dag-correctness", dag_correctness),
        ("parallel-schedule", parallel_schedule),
        ("dark-mode-golden-replay", dark_mode_replay),
        ("gate-and-retry-thresholds", gate_and_retry),
        ("retrieval-vs-oracle", retrieval_vs_oracle),
        ("output-contract-parsers", output_contracts),
        ("sandbox-safety", sandbox_safety),
        ("curriculum-monotonicity", curriculum_monotonicity),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, check) in criteria {
        let outcome = panic::catch_unwind(AssertUnwindSafe(check))
            .unwrap_or_else(|p| {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_else(|| "panicked".into());
                Err(format!("panic: {msg}"))
            });
        match outcome {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

// ---------------------------------------------------------------- DAGs

const DAG_COUNT: usize = 500;
const DAG_MAX_NODES: usize = 12;
const DAG_TIME_LIMIT: Duration = Duration::from_secs(5);

/// Random graph over `n` nodes. Most are acyclic; some get a back edge.
fn random_graph(rng: &mut StdRng) -> (Vec<String>, BTreeMap<String, BTreeSet<String>>) {
    let n = rng.gen_range(1..=DAG_MAX_NODES);
    let mut names: Vec<String> = (0..n).map(|i| format!("t{i:02}")).collect();
    names.shuffle(rng);
    let density: f64 = rng.gen_range(0.0..0.6);
    let mut deps: BTreeMap<String, BTreeSet<String>> = names.iter().map(|n| (n.clone(), BTreeSet::new())).collect();
    for j in 0..n {
        for i in 0..j {
            if rng.gen_bool(density) {
                deps.get_mut(&names[j]).unwrap().insert(names[i].clone());
            }
        }
    }
    if n > 1 && rng.gen_bool(0.25) {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        // b depends on a where a already (maybe) reaches b: possible cycle,
        // or a self-loop when a == b.
        deps.get_mut(&names[a]).unwrap().insert(names[b].clone());
    }
    (names, deps)
}

/// Transitive dependency closure by repeated expansion.
fn closure(deps: &BTreeMap<String, BTreeSet<String>>) -> BTreeMap<String, BTreeSet<String>> {
    let mut reach = deps.clone();
    loop {
        let mut changed = false;
        for name in deps.keys() {
            let current: Vec<String> = reach[name].iter().cloned().collect();
            for d in current {
                let more: Vec<String> = reach[&d].iter().cloned().collect();
                for m in more {
                    changed |= reach.get_mut(name).unwrap().insert(m);
                }
            }
        }
        if !changed {
            return reach;
        }
    }
}

fn longest_chain(name: &str, deps: &BTreeMap<String, BTreeSet<String>>, memo: &mut BTreeMap<String, usize>) -> usize {
    if let Some(v) = memo.get(name) {
        return *v;
    }
    let v = deps[name].iter().map(|d| 1 + longest_chain(d, deps, memo)).max().unwrap_or(0);
    memo.insert(name.to_string(), v);
    v
}

fn dag_correctness() -> Check {
    let mut rng = StdRng::seed_from_u64(0x5eed_da65);
    let started = Instant::now();
    let (mut acyclic, mut cyclic, mut ready_checks) = (0, 0, 0);
    for case in 0..DAG_COUNT {
        let (names, deps) = random_graph(&mut rng);
        let subtasks =
            names.iter().map(|n| Subtask::new(n.clone(), format!("step {n}"), SubtaskKind::Code, deps[n].clone()));
        let built = TaskGraph::from_subtasks("random", subtasks);
        let reach = closure(&deps);
        let has_cycle = reach.iter().any(|(n, r)| r.contains(n));
        match (&built, has_cycle) {
            (Err(GraphError::CycleDetected(members)), true) => {
                // Every reported member lies on a cycle.
                ensure(members.iter().all(|m| reach[m].contains(m)), || format!("case {case}: bad cycle {members:?}"))?;
                cyclic += 1;
                continue;
            }
            (Ok(_), false) => acyclic += 1,
            (other, _) => return Err(format!("case {case}: validate gave {other:?}, oracle cycle={has_cycle}")),
        }
        let mut graph = built.unwrap();

        let mut memo = BTreeMap::new();
        let depth = names.iter().map(|n| longest_chain(n, &deps, &mut memo)).max().unwrap_or(0) + 1;
        let mut expected = vec![Vec::new(); depth];
        for n in deps.keys() {
            expected[memo[n]].push(n.clone());
        }
        let waves = graph.topological_waves().map_err(|e| format!("case {case}: {e}"))?;
        ensure(waves == expected, || format!("case {case}: waves {waves:?} != {expected:?}"))?;

        // Complete nodes in a random topological order, checking the
        // ready set against the explicit dependency test at every step.
        let mut done: BTreeSet<String> = BTreeSet::new();
        while done.len() < names.len() {
            let oracle: Vec<String> =
                deps.iter().filter(|(n, d)| !done.contains(*n) && d.is_subset(&done)).map(|(n, _)| n.clone()).collect();
            let ready = graph.ready_set();
            ensure(ready == oracle, || format!("case {case}: ready {ready:?} != {oracle:?} after {done:?}"))?;
            ready_checks += 1;
            let pick = oracle.choose(&mut rng).expect("an acyclic graph always has a ready node").clone();
            graph.complete(&pick, "ok".into(), 1).map_err(|e| e.to_string())?;
            done.insert(pick);
        }
        ensure(graph.ready_set().is_empty(), || format!("case {case}: ready set not empty at the end"))?;
    }
    let elapsed = started.elapsed();
    ensure(elapsed < DAG_TIME_LIMIT, || format!("took {elapsed:?}, limit {DAG_TIME_LIMIT:?}"))?;
    Ok(format!(
        "{DAG_COUNT} graphs ({acyclic} acyclic, {cyclic} cyclic), {ready_checks} ready-set checks, 100% agreement in {:.0} ms",
        elapsed.as_secs_f64() * 1000.0
    ))
}

// ---------------------------------------------------------------- schedule

const SCHEDULE_REQUEST: &str = "Prepare the quarterly figures and send the summary";
const SCHEDULE_UNIT: Duration = Duration::from_millis(250);

fn schedule_plan() -> Value {
    let edges: [(&str, &[&str]); 6] = [("1", &[]), ("2", &[]), ("3", &[]), ("4", &["2"]), ("5", &["1", "4"]), ("6", &["3"])];
    let mut plan = serde_json::Map::new();
    for (name, deps) in edges {
        plan.insert(
            name.into(),
            json!({"name": name, "description": format!("Step {name} of the figures"), "dependencies": deps, "type": "Code"}),
        );
    }
    Value::Object(plan)
}

fn task_name(prompt: &str) -> Option<String> {
    prompt.lines().find_map(|l| l.strip_prefix("Task Name: ")).map(|s| s.trim().to_string())
}

fn schedule_backend() -> ScriptedBackend {
    let plan = schedule_plan();
    ScriptedBackend::new()
        .on(Purpose::Plan, &[SCHEDULE_REQUEST], format!("```json\n{plan:#}\n```"))
        .on_fn(Some(Purpose::GenerateTool), |req| {
            let name = task_name(req.last_user())?;
            Some(format!(
                "```python\nclass node_{name}(BaseAction):\n    def __init__(self):\n        self._description = \"Step {name}.\"\n```\n<invoke>node_{name}()()</invoke>\n<fake-params>None</fake-params>"
            ))
        })
        .on(Purpose::Critique, &[], r#"{"reasoning": "step finished", "judge": true, "score": 7}"#)
        .on(Purpose::Qa, &[], "All figures are ready.")
}

fn parallel_schedule() -> Check {
    let expected: Vec<Vec<String>> =
        [&["1", "2", "3"][..], &["4", "6"], &["5"]].iter().map(|w| w.iter().map(|s| s.to_string()).collect()).collect();
    let graph = TaskGraph::from_plan_json(SCHEDULE_REQUEST, &schedule_plan()).map_err(|e| e.to_string())?;
    let waves = graph.topological_waves().map_err(|e| e.to_string())?;
    ensure(waves == expected, || format!("topological waves {waves:?}"))?;

    // Record once, then replay with a simulated unit-time runtime.
    let dir = tempfile::tempdir().unwrap();
    let sandbox = dir.path().join("sandbox");
    fs::create_dir_all(&sandbox).unwrap();
    let transcript = dir.path().join("schedule.jsonl");
    let config = AgentConfig { parallel: 3, ..AgentConfig::new(&sandbox) };
    let recorder = RecordingBackend::new(schedule_backend(), &transcript, sandbox_keyer(&sandbox)).unwrap();
    let agent = Agent::new(
        Arc::new(recorder),
        Arc::new(CountingRuntime::simulated(Duration::from_millis(1))),
        Arc::new(memory_at(&dir.path().join("memory"))),
        Arc::new(TemplateSet::default()),
        config.clone(),
    );
    agent.run_task(SCHEDULE_REQUEST).map_err(|e| format!("recording run: {e}"))?;

    let runtime = Arc::new(CountingRuntime::simulated(SCHEDULE_UNIT));
    let replay = ReplayBackend::from_file(&transcript, sandbox_keyer(&sandbox)).map_err(|e| e.to_string())?;
    let agent = Agent::new(
        Arc::new(replay),
        runtime.clone(),
        Arc::new(memory_at(&dir.path().join("memory2"))),
        Arc::new(TemplateSet::default()),
        config,
    );
    let report = agent.run_task(SCHEDULE_REQUEST).map_err(|e| format!("replayed run: {e}"))?;
    ensure(report.waves == expected, || format!("executed waves {:?}", report.waves))?;

    // Cluster execution start times: a gap of half a unit separates waves.
    let mut starts = runtime.starts.lock().unwrap().clone();
    starts.sort_by_key(|(t, _)| *t);
    let mut groups: Vec<BTreeSet<String>> = Vec::new();
    let mut last: Option<Instant> = None;
    for (t, invocation) in &starts {
        if last.is_none_or(|l| t.duration_since(l) > SCHEDULE_UNIT / 2) {
            groups.push(BTreeSet::new());
        }
        let node = invocation.trim_start_matches("node_").trim_end_matches("()()").to_string();
        groups.last_mut().unwrap().insert(node);
        last = Some(*t);
    }
    let expected_sets: Vec<BTreeSet<String>> = expected.iter().map(|w| w.iter().cloned().collect()).collect();
    ensure(groups == expected_sets, || format!("concurrent start groups {groups:?}"))?;
    Ok(format!("waves {expected:?}; {} concurrent start groups at parallelism 3", groups.len()))
}

// ---------------------------------------------------------------- dark mode

fn dark_mode_replay() -> Check {
    let transcript = fixtures_dir().join("darkmode.jsonl");
    let manifest = RunManifest::load(&RunManifest::sidecar_path(&transcript)).map_err(|e| e.to_string())?;
    let expected = manifest.report.clone().ok_or("fixture manifest has no report")?;
    ensure(manifest.tools.iter().all(|t| t.name != "change_system_to_dark_mode"), || "tool already present".into())?;
    let mut renders = Vec::new();
    for run in 1..=3 {
        let dir = tempfile::tempdir().unwrap();
        let runtime = Arc::new(CountingRuntime::local());
        let outcome = replay_manifest(&manifest, &transcript, Arc::new(TemplateSet::default()), runtime.clone(), dir.path())
            .map_err(|e| e.to_string())?;
        ensure(outcome.error.is_none(), || format!("run {run}: {:?}", outcome.error))?;
        ensure(outcome.matches(), || format!("run {run} diverged:\n{}", outcome.diff().join("\n")))?;
        let report = outcome.actual.unwrap();
        check_dark_mode_report(&report).map_err(|e| format!("run {run}: {e}"))?;
        ensure(runtime.scripts() == 1, || format!("run {run}: {} script executions", runtime.scripts()))?;

        let appearance = fs::read_to_string(dir.path().join("sandbox/appearance.json")).unwrap_or_default();
        ensure(appearance.contains("dark"), || format!("run {run}: appearance.json is {appearance:?}"))?;

        let repo = ToolRepository::open(dir.path().join("memory"), Arc::new(HashEmbedder::default())).unwrap();
        let before: BTreeSet<String> = manifest.tools.iter().map(|t| t.name.clone()).collect();
        let after: BTreeSet<String> = repo.names().into_iter().collect();
        let new: Vec<&String> = after.difference(&before).collect();
        ensure(new == ["change_system_to_dark_mode"] && after.len() == before.len() + 1, || {
            format!("run {run}: new tools {new:?}")
        })?;
        let stored = repo.get("change_system_to_dark_mode").unwrap();
        ensure(stored.score == 9, || format!("stored score {}", stored.score))?;
        renders.push(report.to_json());
    }
    ensure(renders.iter().all(|r| *r == renders[0]), || "reports differ between runs".into())?;
    ensure(renders[0] == expected.to_json(), || "report differs from the recorded one".into())?;
    Ok(format!("3 replays byte-identical ({} bytes); repo gained exactly 1 tool", renders[0].len()))
}

fn check_dark_mode_report(report: &RunReport) -> Result<(), String> {
    ensure(report.success, || format!("run failed: {:?}", report.failure))?;
    ensure(report.tools_added == ["change_system_to_dark_mode"], || format!("tools_added {:?}", report.tools_added))?;
    let sub = report.subtasks.get("change_system_to_dark_mode").ok_or("missing subtask")?;
    ensure(sub.kind == SubtaskKind::Code && sub.status == SubtaskStatus::Completed, || format!("{sub:?}"))?;
    let verdict = sub.verdicts.last().ok_or("no verdict")?;
    ensure(verdict.judge && verdict.score == 9, || format!("verdict {verdict:?}"))?;
    let first = sub.results.first().ok_or("no attempts")?;
    ensure(first.invocation == "change_system_to_dark_mode()()", || format!("invocation {}", first.invocation))?;
    Ok(())
}

// ---------------------------------------------------------------- gate

const GATE_REQUEST: &str = "Invert the colours of every bitmap in the folder";
const GATE_NODE: &str = "invert_bitmaps";

fn gate_tool(tag: &str, fails: bool) -> String {
    let body = if fails {
        format!("        raise RuntimeError(\"bitmap decoder missing ({tag})\")\n")
    } else {
        "        return \"inverted 0 bitmaps\"\n".to_string()
    };
    format!(
        "```python\nfrom base_action import BaseAction\n\n\nclass {GATE_NODE}(BaseAction):\n    def __init__(self):\n        self._description = \"Invert the colours of bitmap images.\"\n\n    def __call__(self, *args, **kwargs):\n{body}```\n<invoke>{GATE_NODE}()()</invoke>\n<fake-params>None</fake-params>"
    )
}

fn gate_backend(score: u8, judge: bool) -> ScriptedBackend {
    let plan = json!({GATE_NODE: {"name": GATE_NODE, "description": GATE_REQUEST, "dependencies": [], "type": "Code"}});
    let mut b = ScriptedBackend::new()
        .on(Purpose::Plan, &[GATE_REQUEST], format!("```json\n{plan}\n```"))
        .on(Purpose::GenerateTool, &[GATE_NODE], gate_tool("v1", !judge))
        .on(Purpose::Critique, &[], json!({"reasoning": "checked the output", "judge": judge, "score": score}).to_string())
        .on(Purpose::Qa, &[], "Done.");
    if !judge {
        b = b.on(Purpose::Refine, &["(v1)"], gate_tool("v2", true)).on(Purpose::Refine, &["(v2)"], gate_tool("v3", true));
    }
    b
}

fn gate_and_retry() -> Check {
    for score in 0..=10i64 {
        ensure(gate_persistence(score) == Ok(score > 8), || format!("gate({score})"))?;
    }
    for (score, persists) in [(9u8, true), (8, false)] {
        let dir = tempfile::tempdir().unwrap();
        let sandbox = dir.path().join("sandbox");
        fs::create_dir_all(&sandbox).unwrap();
        let memory = Arc::new(memory_at(&dir.path().join("memory")));
        let agent = Agent::new(
            Arc::new(gate_backend(score, true)),
            Arc::new(LocalRuntime::new()),
            memory.clone(),
            Arc::new(TemplateSet::default()),
            AgentConfig::new(&sandbox),
        );
        let report = agent.run_task(GATE_REQUEST).map_err(|e| format!("score {score}: {e}"))?;
        let stored = memory.repo.get(GATE_NODE).is_some();
        ensure(stored == persists && report.tools_added.is_empty() != persists, || {
            format!("score {score}: stored={stored}, tools_added={:?}", report.tools_added)
        })?;
    }

    // Always-failing flow: record it, then replay with call counters.
    let dir = tempfile::tempdir().unwrap();
    let sandbox = dir.path().join("sandbox");
    fs::create_dir_all(&sandbox).unwrap();
    let transcript = dir.path().join("failing.jsonl");
    let recorder = RecordingBackend::new(gate_backend(3, false), &transcript, sandbox_keyer(&sandbox)).unwrap();
    let agent = Agent::new(
        Arc::new(recorder),
        Arc::new(LocalRuntime::new()),
        Arc::new(memory_at(&dir.path().join("memory"))),
        Arc::new(TemplateSet::default()),
        AgentConfig::new(&sandbox),
    );
    let _ = agent.run_task(GATE_REQUEST);

    let backend = Arc::new(Counted::new(
        ReplayBackend::from_file(&transcript, sandbox_keyer(&sandbox)).map_err(|e| e.to_string())?,
    ));
    let runtime = Arc::new(CountingRuntime::local());
    let memory = Arc::new(memory_at(&dir.path().join("memory2")));
    let agent =
        Agent::new(backend.clone(), runtime.clone(), memory.clone(), Arc::new(TemplateSet::default()), AgentConfig::new(&sandbox));
    let report = match agent.run_task(GATE_REQUEST) {
        Err(AgentError::TaskFailed(r)) => *r,
        Ok(_) => return Err("always-failing run succeeded".into()),
        Err(e) => return Err(format!("always-failing run: {e}")),
    };
    let sub = &report.subtasks[GATE_NODE];
    let (execs, refines) = (runtime.scripts(), backend.count(Purpose::Refine));
    ensure(execs == 3 && refines == 2, || format!("{execs} executions, {refines} refinements"))?;
    ensure(sub.status == SubtaskStatus::Failed && sub.attempts == 3, || format!("{:?} after {}", sub.status, sub.attempts))?;
    ensure(backend.count(Purpose::Critique) == 3 && memory.repo.is_empty(), || "critic count or repo".into())?;
    Ok("score 9 persisted, score 8 not; failing replay ran 3 executions and 2 refinements, then Failed".into())
}

// ---------------------------------------------------------------- retrieval

const VOCAB: [&str; 16] = [
    "read", "write", "csv", "json", "file", "folder", "create", "delete", "image", "resize", "send", "email", "search",
    "web", "chart", "plot",
];

fn random_description(rng: &mut StdRng) -> String {
    let len = rng.gen_range(1..=5);
    (0..len).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Hashed token counts of a text.
fn bucket_counts(e: &HashEmbedder, text: &str) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for tok in text.split_whitespace() {
        *m.entry(e.bucket(&tok.to_lowercase())).or_default() += 1;
    }
    m
}

/// Exact similarity against a fixed query as the fraction dot^2 / |t|^2;
/// the query norm is common to every tool and drops out of comparisons.
fn exact_score(q: &BTreeMap<usize, u64>, t: &BTreeMap<usize, u64>) -> (u128, u128) {
    let dot: u64 = q.iter().map(|(k, v)| v * t.get(k).copied().unwrap_or(0)).sum();
    let norm: u64 = t.values().map(|v| v * v).sum();
    (u128::from(dot) * u128::from(dot), u128::from(norm))
}

fn cmp_exact(a: (u128, u128), b: (u128, u128)) -> std::cmp::Ordering {
    (a.0 * b.1).cmp(&(b.0 * a.1))
}

fn float_similarity(q: &BTreeMap<usize, u64>, t: &BTreeMap<usize, u64>) -> f64 {
    let dot: u64 = q.iter().map(|(k, v)| v * t.get(k).copied().unwrap_or(0)).sum();
    let n = |m: &BTreeMap<usize, u64>| (m.values().map(|v| v * v).sum::<u64>() as f64).sqrt();
    dot as f64 / (n(q) * n(t))
}

fn retrieval_vs_oracle() -> Check {
    let mut rng = StdRng::seed_from_u64(0x7e7_51e5);
    let embedder = Arc::new(HashEmbedder::default());
    let (mut queries, mut hits) = (0, 0);
    for case in 0..50 {
        let dir = tempfile::tempdir().unwrap();
        let repo = ToolRepository::open(dir.path(), embedder.clone()).unwrap();
        let size = rng.gen_range(0..=50);
        let mut tools: Vec<(String, String)> = Vec::new();
        for i in 0..size {
            // Some descriptions repeat so ties by name get exercised.
            let description = if i > 0 && rng.gen_bool(0.2) {
                tools[rng.gen_range(0..tools.len())].1.clone()
            } else {
                random_description(&mut rng)
            };
            let name = format!("tool_{:03}", rng.gen_range(0..1000));
            if tools.iter().any(|(n, _)| *n == name) {
                continue;
            }
            let record = ToolRecord::script(&name, &description, "pass", 9, embedder.as_ref()).unwrap();
            repo.store(record).unwrap();
            tools.push((name, description));
        }
        for _ in 0..4 {
            let query = random_description(&mut rng);
            let k = *[1usize, 3, 5, 50].choose(&mut rng).unwrap();
            let mut thresholds = vec![0.0, 0.5, 0.75, rng.gen_range(0.0..1.0)];
            // A threshold equal to an actual similarity must keep that tool.
            if let Some((_, d)) = tools.first() {
                let q = embedder.embed(&query).unwrap();
                thresholds.push(taskpilot_core::memory::cosine(&q, &embedder.embed(d).unwrap()));
            }
            for threshold in thresholds {
                let got = repo.retrieve(&query, k, threshold).map_err(|e| e.to_string())?;
                let q = embedder.embed(&query).unwrap();
                let qc = bucket_counts(&embedder, &query);
                let mut oracle: Vec<((u128, u128), f64, &str)> = tools
                    .iter()
                    .map(|(n, d)| {
                        let tc = bucket_counts(&embedder, d);
                        (exact_score(&qc, &tc), float_similarity(&qc, &tc), n.as_str())
                    })
                    .filter(|(_, _, n)| {
                        let d = &tools.iter().find(|t| t.0 == *n).unwrap().1;
                        taskpilot_core::memory::cosine(&q, &embedder.embed(d).unwrap()) >= threshold
                    })
                    .collect();
                oracle.sort_by(|a, b| cmp_exact(b.0, a.0).then(a.2.cmp(b.2)));
                oracle.truncate(k);
                let want: Vec<&str> = oracle.iter().map(|o| o.2).collect();
                let have: Vec<&str> = got.iter().map(|s| s.record.name.as_str()).collect();
                ensure(want == have, || {
                    format!("case {case}: query {query:?} k={k} t={threshold}: got {have:?}, oracle {want:?}")
                })?;
                for (s, o) in got.iter().zip(&oracle) {
                    ensure((s.similarity - o.1).abs() < 1e-6, || format!("case {case}: similarity {} vs {}", s.similarity, o.1))?;
                }
                queries += 1;
                hits += got.len();
            }
        }
    }
    Ok(format!("50 repositories, {queries} queries, {hits} hits, exact agreement"))
}

// ---------------------------------------------------------------- parsers

fn err_name_actor(e: &ActorError) -> String {
    match e {
        ActorError::MissingInvokeTag => "MissingInvokeTag",
        ActorError::UnclosedTag(_) => "UnclosedTag",
        ActorError::MissingCodeBlock => "MissingCodeBlock",
        ActorError::SchemaViolation(_) => "SchemaViolation",
        ActorError::GenerationFailed(_) => "GenerationFailed",
        _ => "Other",
    }
    .into()
}

fn err_name_extract(e: &ExtractError) -> String {
    match e {
        ExtractError::TagMissing(_) => "TagMissing",
        ExtractError::TagUnclosed(_) => "TagUnclosed",
        ExtractError::NoJsonFound => "NoJsonFound",
        ExtractError::ParseError(_) => "ParseError",
        ExtractError::NoCodeBlock => "NoCodeBlock",
    }
    .into()
}

fn err_name_plan(e: &PlanError) -> String {
    match e {
        PlanError::NoJsonFound => "NoJsonFound".into(),
        PlanError::SchemaViolation(_) => "SchemaViolation".into(),
        PlanError::Graph(GraphError::CycleDetected(_)) => "CycleDetected".into(),
        PlanError::Graph(GraphError::UnknownKind(_)) => "UnknownKind".into(),
        other => format!("Other({other})"),
    }
}

fn run_contract(parser: &str, input: &str) -> Result<Value, String> {
    match parser {
        "extract_json" => extract_json(input).map_err(|e| err_name_extract(&e)),
        "invoke_tag" => extract_tagged(input, "invoke").map(Value::from).map_err(|e| err_name_extract(&e)),
        "fake_params_tag" => extract_tagged(input, "fake-params").map(Value::from).map_err(|e| err_name_extract(&e)),
        "invocation" => parse_invocation(input)
            .map(|i| json!({"invocation": i.invocation, "fake_params": i.fake_params}))
            .map_err(|e| err_name_actor(&e)),
        "generated_tool" => parse_generated_tool(input)
            .map(|t| json!({"invocation": t.invocation, "fake_params": t.fake_params}))
            .map_err(|e| err_name_actor(&e)),
        "verdict" => parse_verdict(input)
            .map(|v| json!({"judge": v.judge, "score": v.score, "wants_replan": v.wants_replan}))
            .map_err(|e| err_name_actor(&e)),
        "plan" => parse_plan("contract", input)
            .and_then(|g| g.topological_waves().map_err(PlanError::from))
            .map(|w| json!(w))
            .map_err(|e| err_name_plan(&e)),
        other => Err(format!("unknown parser {other}")),
    }
}

fn output_contracts() -> Check {
    let text = fs::read_to_string(fixtures_dir().join("contracts.json")).map_err(|e| e.to_string())?;
    let cases: Vec<Value> = serde_json::from_str(&text).map_err(|e| e.to_string())?;
    ensure(cases.len() == 30, || format!("{} fixture responses", cases.len()))?;
    let mut failures = Vec::new();
    for case in &cases {
        let id = &case["id"];
        let got = run_contract(case["parser"].as_str().unwrap_or(""), case["input"].as_str().unwrap_or(""));
        let expect = &case["expect"];
        let ok = match (&got, expect.get("ok"), expect.get("err")) {
            (Ok(v), Some(want), None) => v == want,
            (Err(e), None, Some(want)) => want.as_str() == Some(e.as_str()),
            _ => false,
        };
        if !ok {
            failures.push(format!("#{id}: got {got:?}, expected {expect}"));
        }
    }
    ensure(failures.is_empty(), || failures.join("; "))?;
    Ok(format!("{}/{} fixture responses as specified", cases.len(), cases.len()))
}

// ---------------------------------------------------------------- sandbox

/// Shell commands the fuzzer draws from; `{f}` and `{d}` are replaced by
/// random names.
const SHELL_FIXTURES: [&str; 12] = [
    "echo hello > {f}",
    "mkdir -p {d}/inner && echo x > {d}/inner/{f}",
    "cd ~ && echo home > {f}",
    "echo probe > \"$HOME/{f}\"",
    "echo tmp > \"$TMPDIR/{f}\" && ls \"$TMPDIR\"",
    "mkdir -p ~/{d} && touch ~/{d}/{f}",
    "rm -rf {d}",
    "cp -r {d} {d}_copy 2>/dev/null; rm -rf {d}_copy; true",
    "find . -name '{f}' -delete",
    "ls -la .. > listing.txt",
    "cat /etc/hostname > {f} 2>/dev/null; true",
    "sleep 0.01 & echo bg > {f}",
];

const SCRIPT_FIXTURES: [(&str, &str); 4] = [
    (
        "import os\nclass write_home(BaseAction):\n    def __call__(self, name):\n        p = os.path.join(os.path.expanduser('~'), name)\n        open(p, 'w').write('x')\n        return p\n",
        "write_home()('{f}')",
    ),
    (
        "import tempfile\nclass write_tmp(BaseAction):\n    def __call__(self):\n        fd, p = tempfile.mkstemp()\n        return p\n",
        "write_tmp()()",
    ),
    (
        "import os\nclass make_tree(BaseAction):\n    def __call__(self, d):\n        os.makedirs(os.path.join(d, 'a', 'b'), exist_ok=True)\n        return sorted(os.listdir('.'))\n",
        "make_tree()('{d}')",
    ),
    (
        "class raise_error(BaseAction):\n    def __call__(self):\n        raise ValueError('fixture failure')\n",
        "raise_error()()",
    ),
];

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap().flatten() {
            let path = entry.path();
            let rel = path.strip_prefix(root).unwrap().to_path_buf();
            if path.is_dir() {
                out.insert(rel, b"<dir>".to_vec());
                stack.push(path);
            } else {
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn processes_with(marker: &str) -> Vec<String> {
    let mut found = Vec::new();
    for entry in fs::read_dir("/proc").into_iter().flatten().flatten() {
        let Ok(cmdline) = fs::read(entry.path().join("cmdline")) else { continue };
        let text = String::from_utf8_lossy(&cmdline).replace('\0', " ");
        if text.contains(marker) && !text.contains("acceptance") {
            found.push(format!("{}: {text}", entry.file_name().to_string_lossy()));
        }
    }
    found
}

fn wait_reaped(marker: &str) -> Vec<String> {
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        let left = processes_with(marker);
        if left.is_empty() || Instant::now() > deadline {
            return left;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn sandbox_safety() -> Check {
    let dir = tempfile::tempdir().unwrap();
    let sandbox = dir.path().join("sandbox");
    let canary = dir.path().join("canary");
    fs::create_dir_all(&sandbox).unwrap();
    fs::create_dir_all(canary.join("nested")).unwrap();
    fs::write(canary.join("secret.txt"), "do not touch\n").unwrap();
    fs::write(canary.join("nested/data.csv"), "a,b\n1,2\n").unwrap();
    let canary_before = tree(&canary);
    let parent_before: BTreeSet<_> = fs::read_dir(dir.path()).unwrap().flatten().map(|e| e.file_name()).collect();

    let runtime = LocalRuntime::new();
    let mut rng = StdRng::seed_from_u64(0xca_4a_4e);
    let timeout = Duration::from_secs(20);
    let (mut shells, mut scripts) = (0, 0);
    let probe_names: Vec<String> = (0..40).map(|i| format!("probe_{}_{i}", std::process::id())).collect();
    for step in 0..60 {
        let f = probe_names.choose(&mut rng).unwrap().clone();
        let d = format!("dir_{}", rng.gen_range(0..5));
        if rng.gen_bool(0.7) {
            let cmd = SHELL_FIXTURES.choose(&mut rng).unwrap().replace("{f}", &f).replace("{d}", &d);
            runtime.run_shell(&cmd, &sandbox, timeout).map_err(|e| format!("step {step}: `{cmd}`: {e}"))?;
            shells += 1;
        } else {
            let (src, inv) = SCRIPT_FIXTURES.choose(&mut rng).unwrap();
            let source = format!("from base_action import BaseAction\n{src}");
            let inv = inv.replace("{f}", &f).replace("{d}", &d);
            runtime.run_script_tool(&source, &inv, &sandbox, timeout).map_err(|e| format!("step {step}: {inv}: {e}"))?;
            scripts += 1;
        }
        ensure(tree(&canary) == canary_before, || format!("step {step}: canary changed"))?;
    }
    let parent_after: BTreeSet<_> = fs::read_dir(dir.path()).unwrap().flatten().map(|e| e.file_name()).collect();
    ensure(parent_after == parent_before, || format!("sandbox parent changed: {parent_after:?}"))?;
    let home = std::env::var_os("HOME").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("/root"));
    let leaked: Vec<&String> = probe_names.iter().filter(|p| home.join(p).exists()).collect();
    ensure(leaked.is_empty(), || format!("probes written to the real HOME: {leaked:?}"))?;

    // Timeouts kill the whole process group, background children included.
    let marker = format!("97.{}", std::process::id());
    let started = Instant::now();
    let shell = runtime.run_shell(&format!("sleep {marker} & sleep {marker} & wait"), &sandbox, Duration::from_millis(300));
    ensure(matches!(shell, Err(RuntimeError::Timeout(_))), || format!("shell timeout gave {shell:?}"))?;
    let left = wait_reaped(&marker);
    ensure(left.is_empty(), || format!("shell children survived: {left:?}"))?;

    let marker2 = format!("98.{}", std::process::id());
    let source = format!(
        "from base_action import BaseAction\nimport subprocess, time\nclass spawn_and_hang(BaseAction):\n    def __call__(self):\n        subprocess.Popen(['sleep', '{marker2}'])\n        time.sleep(60)\n"
    );
    let script = runtime.run_script_tool(&source, "spawn_and_hang()()", &sandbox, Duration::from_millis(800));
    ensure(matches!(script, Err(RuntimeError::Timeout(_))), || format!("script timeout gave {script:?}"))?;
    let left = wait_reaped(&marker2);
    ensure(left.is_empty(), || format!("script children survived: {left:?}"))?;
    let waited = started.elapsed();
    ensure(waited < Duration::from_secs(10), || format!("timeouts took {waited:?}"))?;
    ensure(tree(&canary) == canary_before, || "canary changed by timed-out runs".into())?;
    Ok(format!("{shells} shell + {scripts} script fuzz runs left the canary untouched; timed-out groups reaped"))
}

// ---------------------------------------------------------------- curriculum

fn curriculum_monotonicity() -> Check {
    let transcript_path = fixtures_dir().join("curriculum.jsonl");
    let transcript = Transcript::load(&transcript_path).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().unwrap();
    let sandbox = dir.path().join("sandbox");
    fs::create_dir_all(&sandbox).unwrap();
    let backend: Arc<dyn ChatBackend> = Arc::new(ReplayBackend::new(transcript, sandbox_keyer(&sandbox)));
    let templates = Arc::new(TemplateSet::default());
    let tasks = propose_curriculum(&templates, &LearningObjective::new(CURRICULUM_OBJECTIVE), backend.as_ref())
        .map_err(|e| e.to_string())?;
    ensure(tasks.len() == 10, || format!("{} tasks", tasks.len()))?;
    ensure(tasks.windows(2).all(|w| w[0].difficulty_rank <= w[1].difficulty_rank), || "difficulty decreases".into())?;

    let agent = Agent::new(
        backend,
        Arc::new(LocalRuntime::new()),
        Arc::new(memory_at(&dir.path().join("memory"))),
        templates,
        AgentConfig::new(&sandbox),
    );
    let report = run_curriculum(CURRICULUM_OBJECTIVE, &tasks, &agent);
    ensure(report.tasks.len() == 10, || format!("{} task reports", report.tasks.len()))?;
    let sizes: Vec<usize> = report.tasks.iter().map(|t| t.repo_size).collect();
    ensure(sizes.windows(2).all(|w| w[0] <= w[1]), || format!("repo sizes {sizes:?}"))?;
    ensure(report.tools_before == 0 && report.tools_after == 8, || {
        format!("tools {} -> {}: {}", report.tools_before, report.tools_after, report.to_json())
    })?;
    Ok(format!("10 tasks replayed; repository sizes {sizes:?}"))
}
