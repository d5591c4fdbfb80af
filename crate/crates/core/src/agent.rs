//! End-to-end run loop: plan, execute waves of ready subtasks, replan on
//! request, synthesize the final answer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{info, warn};

use crate::actor::{Actor, AttemptRecord, CritiqueVerdict, SubtaskOutcome, DEFAULT_MAX_ATTEMPTS};
use crate::env::EnvError;
use crate::llm::{BackendError, ChatBackend, ChatRequest, Purpose, RequestKeyer};
use crate::memory::{ConfigurationContext, Memory};
use crate::planner::{self, PlanError};
use crate::runtime::{Runtime, Timeouts};
use crate::taskgraph::{GraphError, ReplanPatch, SubtaskKind, SubtaskStatus, TaskGraph};
use crate::template::{render, TemplateError, TemplateSet};

pub const DEFAULT_PATCH_LIMIT: u32 = 5;
/// Token that replaces the sandbox path in reports and transcript keys.
pub const SANDBOX_TOKEN: &str = "$SANDBOX";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentConfig {
    pub sandbox: PathBuf,
    /// Subtasks run at once within a wave.
    pub parallel: usize,
    pub max_attempts: u32,
    /// Replan patches allowed per run.
    pub patch_limit: u32,
    pub timeouts: Timeouts,
}

impl AgentConfig {
    pub fn new(sandbox: impl Into<PathBuf>) -> Self {
        Self {
            sandbox: sandbox.into(),
            parallel: 1,
            max_attempts: DEFAULT_MAX_ATTEMPTS,
            patch_limit: DEFAULT_PATCH_LIMIT,
            timeouts: Timeouts::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskReport {
    pub kind: SubtaskKind,
    pub status: SubtaskStatus,
    pub attempts: u32,
    pub verdicts: Vec<CritiqueVerdict>,
    pub results: Vec<AttemptRecord>,
    pub result: Option<String>,
    pub tool_stored: Option<String>,
    pub error: Option<String>,
}

/// Deterministic record of a run: no timestamps or durations, maps sorted,
/// the sandbox path replaced by [`SANDBOX_TOKEN`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub request: String,
    pub success: bool,
    pub plan: Value,
    pub final_plan: Value,
    /// Subtask names in the order their batches ran.
    pub waves: Vec<Vec<String>>,
    pub subtasks: BTreeMap<String, SubtaskReport>,
    pub patches: Vec<ReplanPatch>,
    pub tools_added: Vec<String>,
    pub final_answer: Option<String>,
    pub failure: Option<String>,
}

impl RunReport {
    fn new(request: &str) -> Self {
        Self {
            request: request.to_string(),
            success: false,
            plan: Value::Null,
            final_plan: Value::Null,
            waves: Vec::new(),
            subtasks: BTreeMap::new(),
            patches: Vec::new(),
            tools_added: Vec::new(),
            final_answer: None,
            failure: None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    /// Total executions across subtasks.
    pub fn executions(&self) -> usize {
        self.subtasks.values().flat_map(|s| &s.results).filter(|a| a.executed).count()
    }

    fn record(&mut self, kind: SubtaskKind, outcome: &SubtaskOutcome) {
        let entry = self.subtasks.entry(outcome.name.clone()).or_insert_with(|| SubtaskReport {
            kind,
            status: SubtaskStatus::Pending,
            attempts: 0,
            verdicts: Vec::new(),
            results: Vec::new(),
            result: None,
            tool_stored: None,
            error: None,
        });
        entry.status = outcome.status;
        entry.attempts += outcome.attempts;
        entry.verdicts.extend(outcome.attempt_log.iter().map(|a| a.verdict.clone()));
        entry.results.extend(outcome.attempt_log.iter().cloned());
        entry.result.clone_from(&outcome.result);
        if outcome.tool_stored.is_some() {
            entry.tool_stored.clone_from(&outcome.tool_stored);
        }
        entry.error.clone_from(&outcome.error);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AgentEvent {
    Planned { subtasks: Vec<String> },
    WaveStarted { index: usize, subtasks: Vec<String> },
    /// Emitted from worker threads; ordering across a wave is not fixed.
    SubtaskStarted { name: String },
    SubtaskFinished { name: String, status: SubtaskStatus },
    Replanned { failed: String, reason: String },
    FinalAnswerRequested { prompt: String },
}

pub type Observer = Arc<dyn Fn(&AgentEvent) + Send + Sync>;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error(transparent)]
    Planning(#[from] PlanError),
    #[error("task failed: {}", .0.failure.as_deref().unwrap_or("unknown reason"))]
    TaskFailed(Box<RunReport>),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

pub struct Agent {
    backend: Arc<dyn ChatBackend>,
    runtime: Arc<dyn Runtime>,
    memory: Arc<Memory>,
    templates: Arc<TemplateSet>,
    config: AgentConfig,
    redactor: RequestKeyer,
    observer: Option<Observer>,
}

impl Agent {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        runtime: Arc<dyn Runtime>,
        memory: Arc<Memory>,
        templates: Arc<TemplateSet>,
        config: AgentConfig,
    ) -> Self {
        let redactor = sandbox_keyer(&config.sandbox);
        Self { backend, runtime, memory, templates, config, redactor, observer: None }
    }

    pub fn with_observer(mut self, observer: Observer) -> Self {
        self.observer = Some(observer);
        self
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn memory(&self) -> &Memory {
        &self.memory
    }

    fn emit(&self, event: AgentEvent) {
        if let Some(o) = &self.observer {
            o(&event);
        }
    }

    fn actor(&self) -> Actor {
        let mut actor = Actor::new(
            self.backend.clone(),
            self.runtime.clone(),
            self.templates.clone(),
            self.memory.repo.clone(),
        );
        actor.max_attempts = self.config.max_attempts;
        actor.timeouts = self.config.timeouts;
        actor
    }

    /// Runs `request` to completion. A run that ends with a failed subtask
    /// returns [`AgentError::TaskFailed`] carrying the report.
    pub fn run_task(&self, request: &str) -> Result<RunReport, AgentError> {
        let sandbox = self.config.sandbox.as_path();
        let planning = self.memory.planning_context(sandbox)?;
        let mut graph = planner::plan(&self.templates, request, &planning, &*self.backend)?;
        self.emit(AgentEvent::Planned { subtasks: graph.nodes.keys().cloned().collect() });

        let mut report = RunReport::new(request);
        report.plan = graph.to_plan_json();
        let actor = self.actor();
        let mut tools_added = BTreeSet::new();
        let mut patches_used = 0;

        loop {
            let ready = graph.ready_set();
            if ready.is_empty() {
                break;
            }
            self.emit(AgentEvent::WaveStarted { index: report.waves.len(), subtasks: ready.clone() });
            report.waves.push(ready.clone());

            let mut jobs: Vec<(String, Result<ConfigurationContext, String>)> = Vec::new();
            for name in &ready {
                let ctx = self.memory.assemble(&graph, name, sandbox).map_err(|e| e.to_string());
                jobs.push((name.clone(), ctx));
                graph.set_status(name, SubtaskStatus::Running)?;
            }
            let outcomes = self.run_batch(&actor, &jobs);

            for outcome in &outcomes {
                let kind = graph.get(&outcome.name).map_or(SubtaskKind::Code, |t| t.kind);
                let attempts = graph.get(&outcome.name).map_or(0, |t| t.attempts) + outcome.attempts;
                report.record(kind, outcome);
                if let Some(t) = &outcome.tool_stored {
                    tools_added.insert(t.clone());
                }
                match (&outcome.status, &outcome.result) {
                    (SubtaskStatus::Completed, Some(r)) => graph.complete(&outcome.name, r.clone(), attempts)?,
                    _ => graph.fail(&outcome.name, attempts)?,
                }
                self.emit(AgentEvent::SubtaskFinished { name: outcome.name.clone(), status: outcome.status });
            }

            let mut fatal = None;
            for outcome in outcomes.iter().filter(|o| o.status == SubtaskStatus::Failed) {
                if graph.get(&outcome.name).map(|t| t.status) != Some(SubtaskStatus::Failed) {
                    continue;
                }
                match self.try_replan(&mut graph, outcome, &mut patches_used, &mut report) {
                    Ok(()) => {}
                    Err(reason) => {
                        fatal = Some(reason);
                        break;
                    }
                }
            }
            if let Some(reason) = fatal {
                warn!(%reason, "run stopped");
                report.failure = Some(reason);
                break;
            }
        }

        report.final_plan = graph.to_plan_json();
        report.tools_added = tools_added.into_iter().collect();
        if graph.all_completed() && report.failure.is_none() {
            report.final_answer = Some(self.final_answer(&graph)?);
            report.success = true;
        } else if report.failure.is_none() {
            report.failure = Some("no runnable subtasks remain".to_string());
        }
        let report = self.redact(report);
        info!(success = report.success, "run finished");
        if report.success {
            Ok(report)
        } else {
            Err(AgentError::TaskFailed(Box::new(report)))
        }
    }

    fn run_batch(&self, actor: &Actor, jobs: &[(String, Result<ConfigurationContext, String>)]) -> Vec<SubtaskOutcome> {
        let run_one = |(name, ctx): &(String, Result<ConfigurationContext, String>)| -> SubtaskOutcome {
            self.emit(AgentEvent::SubtaskStarted { name: name.clone() });
            match ctx {
                Ok(ctx) => actor.run_subtask_loop(ctx).unwrap_or_else(|e| SubtaskOutcome::errored(name, e)),
                Err(e) => SubtaskOutcome::errored(name, e),
            }
        };
        let parallel = self.config.parallel.max(1);
        if parallel == 1 {
            return jobs.iter().map(run_one).collect();
        }
        let mut outcomes = Vec::with_capacity(jobs.len());
        for chunk in jobs.chunks(parallel) {
            std::thread::scope(|s| {
                let handles: Vec<_> = chunk.iter().map(|job| s.spawn(move || run_one(job))).collect();
                for (h, (name, _)) in handles.into_iter().zip(chunk) {
                    outcomes.push(h.join().unwrap_or_else(|_| SubtaskOutcome::errored(name, "subtask worker panicked")));
                }
            });
        }
        outcomes
    }

    /// Applies a replan patch for a failed subtask, or explains why the run
    /// cannot continue.
    fn try_replan(
        &self,
        graph: &mut TaskGraph,
        outcome: &SubtaskOutcome,
        patches_used: &mut u32,
        report: &mut RunReport,
    ) -> Result<(), String> {
        let name = &outcome.name;
        let stopped = |why: &str| format!("subtask `{name}` failed after {} attempt(s): {why}", outcome.attempts);
        let verdict = match outcome.last_verdict() {
            Some(v) if outcome.wants_replan() => v,
            _ => return Err(stopped(outcome.error.as_deref().unwrap_or("no replan requested"))),
        };
        if *patches_used >= self.config.patch_limit {
            return Err(stopped("replan limit reached"));
        }
        let patch = match planner::propose_patch(&self.templates, verdict, graph, name, &*self.backend) {
            Ok(Some(p)) => p,
            Ok(None) => return Err(stopped("no replan proposed")),
            Err(e) => return Err(stopped(&format!("replan failed: {e}"))),
        };
        let next = graph.apply_patch(&patch).map_err(|e| stopped(&format!("replan patch rejected: {e}")))?;
        *patches_used += 1;
        *graph = next;
        self.emit(AgentEvent::Replanned { failed: name.clone(), reason: patch.reason.clone() });
        report.patches.push(patch);
        if graph.get(name).map(|t| t.status) == Some(SubtaskStatus::Failed) {
            return Err(stopped("replan patch left it unchanged"));
        }
        Ok(())
    }

    fn final_answer(&self, graph: &TaskGraph) -> Result<String, AgentError> {
        let leaves: BTreeSet<&str> = graph.leaves().iter().map(|t| t.name.as_str()).collect();
        let results = graph
            .nodes
            .values()
            .map(|t| {
                let mark = if leaves.contains(t.name.as_str()) { " (final)" } else { "" };
                format!("{}{mark}: {}", t.name, t.result.as_deref().unwrap_or_default())
            })
            .collect::<Vec<_>>()
            .join("\n");
        let mut values = BTreeMap::new();
        values.insert("request", graph.root_request.clone());
        values.insert("results", results);
        let prompt = render(&self.templates.final_answer, &values)?;
        self.emit(AgentEvent::FinalAnswerRequested { prompt: prompt.clone() });
        Ok(self.backend.complete(&ChatRequest::user(Purpose::Qa, prompt))?.trim().to_string())
    }

    fn redact(&self, report: RunReport) -> RunReport {
        let mut value = serde_json::to_value(&report).expect("reports serialize");
        redact_strings(&mut value, &self.redactor);
        serde_json::from_value(value).expect("redaction keeps the report shape")
    }
}

/// Keyer that hides the sandbox path, both as given and canonicalized.
pub fn sandbox_keyer(sandbox: &std::path::Path) -> RequestKeyer {
    let mut keyer = RequestKeyer::new().redact(sandbox.display().to_string(), SANDBOX_TOKEN);
    if let Ok(canonical) = sandbox.canonicalize() {
        keyer = keyer.redact(canonical.display().to_string(), SANDBOX_TOKEN);
    }
    keyer
}

fn redact_strings(value: &mut Value, keyer: &RequestKeyer) {
    match value {
        Value::String(s) => *s = keyer.apply(s),
        Value::Array(items) => items.iter_mut().for_each(|v| redact_strings(v, keyer)),
        Value::Object(map) => map.values_mut().for_each(|v| redact_strings(v, keyer)),
        _ => {}
    }
}
