//! Executor, critic and refiner: the per-subtask loop that turns a
//! configured subtask into a result, generating and improving tools on the
//! way.

mod parse;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, info};

pub use parse::{
    parse_fake_params, parse_generated_tool, parse_invocation, parse_verdict, tool_description, CritiqueVerdict,
    GeneratedTool, Invocation, FAKE_PARAMS_TAG, INVOKE_TAG,
};

use crate::env::{diff_snapshots, snapshot_environment, EnvError};
use crate::llm::{BackendError, ChatBackend, ChatRequest, Purpose};
use crate::memory::{
    gate_persistence, sanitize_tool_name, ConfigurationContext, RepositoryError, ToolKind, ToolRecord, ToolRepository,
};
use crate::runtime::{ExecutionResult, Runtime, RuntimeError, Timeouts};
use crate::taskgraph::{SubtaskKind, SubtaskStatus};
use crate::template::{render, TemplateError, TemplateSet};

pub const DEFAULT_MAX_ATTEMPTS: u32 = 3;
/// Extra backend calls allowed when a reply breaks its output contract.
pub const PARSE_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum ActorError {
    #[error("tool generation failed: {0}")]
    GenerationFailed(String),
    #[error("reply has no <invoke> tag")]
    MissingInvokeTag,
    #[error("reply has an unclosed <{0}> tag")]
    UnclosedTag(String),
    #[error("reply has no code block")]
    MissingCodeBlock,
    #[error("invocation uses placeholder values for {0:?}")]
    FakeParamsUnresolved(Vec<String>),
    #[error(transparent)]
    RuntimeFailure(#[from] RuntimeError),
    #[error("no API tool available for `{0}`")]
    NoApiToolAvailable(String),
    #[error("critic schema violation: {0}")]
    SchemaViolation(String),
    #[error("refinement failed: {0}")]
    RefinementFailed(String),
    #[error("refiner returned the original source unchanged")]
    NoChangeProduced,
    #[error("attempt budget of {0} already spent")]
    AttemptsExhausted(u32),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Repository(#[from] RepositoryError),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// One execute-and-judge round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttemptRecord {
    pub attempt: u32,
    pub tool: String,
    pub invocation: String,
    /// False when the attempt was rejected before reaching a runtime.
    pub executed: bool,
    pub exit_status: i32,
    pub output: String,
    pub error: String,
    pub verdict: CritiqueVerdict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubtaskOutcome {
    pub name: String,
    pub status: SubtaskStatus,
    pub attempts: u32,
    pub executions: u32,
    pub refinements: u32,
    pub result: Option<String>,
    pub attempt_log: Vec<AttemptRecord>,
    /// Name of the tool written to the repository, if any.
    pub tool_stored: Option<String>,
    /// Why the loop stopped early, when it did.
    pub error: Option<String>,
}

impl SubtaskOutcome {
    fn new(name: &str) -> Self {
        Self {
            name: name.to_string(),
            status: SubtaskStatus::Failed,
            attempts: 0,
            executions: 0,
            refinements: 0,
            result: None,
            attempt_log: Vec::new(),
            tool_stored: None,
            error: None,
        }
    }

    /// A failure that happened outside the loop (configuration, backend).
    pub fn errored(name: &str, error: impl std::fmt::Display) -> Self {
        Self { error: Some(error.to_string()), ..Self::new(name) }
    }

    pub fn last_verdict(&self) -> Option<&CritiqueVerdict> {
        self.attempt_log.last().map(|a| &a.verdict)
    }

    pub fn wants_replan(&self) -> bool {
        self.status == SubtaskStatus::Failed && self.last_verdict().is_some_and(|v| v.wants_replan)
    }
}

/// What the loop is running: a script tool or a tool service.
enum Work {
    Script { name: String, source: String, fresh: bool },
    Api { tool: ToolRecord },
}

impl Work {
    fn name(&self) -> &str {
        match self {
            Work::Script { name, .. } => name,
            Work::Api { tool } => &tool.name,
        }
    }

    fn code(&self, invocation: &str) -> String {
        match self {
            Work::Script { source, .. } => source.clone(),
            Work::Api { tool } => {
                format!("{}\nRequest body: {invocation}", api_descriptor(tool))
            }
        }
    }
}

fn api_descriptor(tool: &ToolRecord) -> String {
    match tool.endpoint() {
        Some(e) => format!(
            "Service: {}\nDescription: {}\n{} {}\nRequest schema: {}",
            tool.name, tool.description, e.method, e.url, e.request_schema
        ),
        None => format!("Service: {}\nDescription: {}", tool.name, tool.description),
    }
}

fn or_none(text: &str) -> String {
    if text.trim().is_empty() {
        "None".to_string()
    } else {
        text.trim_end().to_string()
    }
}

/// Error text shown to the critic and refiner.
pub fn error_text(exec: &ExecutionResult) -> String {
    let mut parts = Vec::new();
    if let Some(e) = exec.tool_error() {
        parts.push(format!("tool error: {e}"));
    }
    if !exec.stderr.trim().is_empty() {
        parts.push(exec.stderr.trim_end().to_string());
    }
    if exec.exit_status != 0 {
        parts.push(format!("exit status {}", exec.exit_status));
    }
    or_none(&parts.join("\n"))
}

/// Output text shown to the critic and refiner.
pub fn output_text(exec: &ExecutionResult) -> String {
    let mut parts = Vec::new();
    if !exec.stdout.trim().is_empty() {
        parts.push(exec.stdout.trim_end().to_string());
    }
    if let Some(r) = exec.structured_result.as_ref().and_then(|s| s.get("result")) {
        if !r.is_null() {
            parts.push(format!("result: {r}"));
        }
    }
    or_none(&parts.join("\n"))
}

/// The subtask result recorded when an execution passes review: the
/// harness `result` (strings verbatim), else the captured stdout.
pub fn result_text(exec: &ExecutionResult) -> String {
    match exec.structured_result.as_ref().and_then(|s| s.get("result")) {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Null) | None => exec.stdout.trim().to_string(),
        Some(v) => v.to_string(),
    }
}

fn env_changes(exec: &ExecutionResult) -> String {
    match (&exec.env_before, &exec.env_after) {
        (Some(b), Some(a)) => diff_snapshots(b, a).map(|d| d.summary()).unwrap_or_else(|_| "unknown".into()),
        _ => "None".to_string(),
    }
}

fn values(pairs: Vec<(&str, String)>) -> BTreeMap<&str, String> {
    pairs.into_iter().collect()
}

pub struct Actor {
    backend: Arc<dyn ChatBackend>,
    runtime: Arc<dyn Runtime>,
    templates: Arc<TemplateSet>,
    repo: Arc<ToolRepository>,
    pub max_attempts: u32,
    pub timeouts: Timeouts,
}

impl Actor {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        runtime: Arc<dyn Runtime>,
        templates: Arc<TemplateSet>,
        repo: Arc<ToolRepository>,
    ) -> Self {
        Self { backend, runtime, templates, repo, max_attempts: DEFAULT_MAX_ATTEMPTS, timeouts: Timeouts::default() }
    }

    /// Sends `request`, re-asking with the parse error appended until the
    /// reply parses or the retries run out. Returns the last parse error.
    fn ask<T>(&self, mut request: ChatRequest, parse: impl Fn(&str) -> Result<T, ActorError>) -> Result<T, ActorError> {
        let mut tries = 0;
        loop {
            let reply = self.backend.complete(&request)?;
            match parse(&reply) {
                Ok(v) => return Ok(v),
                Err(e) if tries < PARSE_RETRIES => {
                    debug!(purpose = %request.purpose, error = %e, "reply rejected, asking again");
                    tries += 1;
                    let feedback = format!("Your reply could not be used: {e}. Answer again in the required format.");
                    request = request.with_feedback(&reply, feedback);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Writes a new tool for the subtask with the tool-generator prompt.
    pub fn generate_tool(&self, ctx: &ConfigurationContext) -> Result<GeneratedTool, ActorError> {
        let relevant: Vec<String> =
            ctx.retrieved_tools.iter().filter_map(|t| t.record.source().map(str::to_string)).collect();
        let prompt = render(
            &self.templates.tool_generator,
            &values(vec![
                ("system_version", ctx.environment.system_version.clone()),
                ("system_language", ctx.environment.system_language.clone()),
                ("task_name", sanitize_tool_name(&ctx.subtask.name)),
                ("task_description", ctx.subtask.description.clone()),
                ("pre_tasks_info", ctx.pre_tasks_info()),
                ("relevant_code", or_none(&relevant.join("\n\n"))),
                ("working_dir", ctx.working_dir()),
                ("files_and_folders", ctx.environment.files_and_folders.clone()),
            ]),
        )?;
        self.ask(ChatRequest::user(Purpose::GenerateTool, prompt), parse_generated_tool)
            .map_err(|e| match e {
                ActorError::Backend(_) => e,
                other => ActorError::GenerationFailed(other.to_string()),
            })
    }

    /// Asks for a call of an existing tool. For a tool service the invoke
    /// tag carries the JSON request body.
    pub fn build_invocation(
        &self,
        tool: &ToolRecord,
        ctx: &ConfigurationContext,
        critique: Option<&str>,
    ) -> Result<Invocation, ActorError> {
        let relevant = match tool.kind() {
            ToolKind::ScriptTool => tool.source().unwrap_or_default().to_string(),
            ToolKind::ApiTool => api_descriptor(tool),
        };
        self.invoke_with(&tool.name, &relevant, ctx, critique)
    }

    fn invoke_with(
        &self,
        class_name: &str,
        relevant_code: &str,
        ctx: &ConfigurationContext,
        critique: Option<&str>,
    ) -> Result<Invocation, ActorError> {
        let prompt = render(
            &self.templates.executor,
            &values(vec![
                ("class_name", class_name.to_string()),
                ("task_description", ctx.subtask.description.clone()),
                ("relevant_code", relevant_code.to_string()),
                ("pre_tasks_info", ctx.pre_tasks_info()),
                ("working_dir", ctx.working_dir()),
                ("critique", critique.map_or_else(|| "None".to_string(), or_none)),
            ]),
        )?;
        self.ask(ChatRequest::user(Purpose::Invoke, prompt), parse_invocation)
    }

    /// Answers a QA subtask with one model call.
    pub fn answer_qa(&self, ctx: &ConfigurationContext) -> Result<String, ActorError> {
        let prompt = render(
            &self.templates.qa,
            &values(vec![
                ("request", ctx.request.clone()),
                ("task_description", ctx.subtask.description.clone()),
                ("pre_tasks_info", ctx.pre_tasks_info()),
                ("profile", ctx.profile_snippet.clone()),
            ]),
        )?;
        Ok(self.backend.complete(&ChatRequest::user(Purpose::Qa, prompt))?.trim().to_string())
    }

    /// Judges an execution.
    pub fn critique(
        &self,
        code: &str,
        exec: &ExecutionResult,
        ctx: &ConfigurationContext,
    ) -> Result<CritiqueVerdict, ActorError> {
        let listing = exec
            .env_after
            .as_ref()
            .map_or_else(|| ctx.environment.files_and_folders.clone(), |s| s.listing());
        let prompt = render(
            &self.templates.critic,
            &values(vec![
                ("current_code", code.to_string()),
                ("task", ctx.subtask.description.clone()),
                ("error", error_text(exec)),
                ("output", output_text(exec)),
                ("current_working_dir", ctx.working_dir()),
                ("working_dir", ctx.working_dir()),
                ("files_and_folders", listing),
                ("env_changes", env_changes(exec)),
                ("next_action", ctx.next_action()),
            ]),
        )?;
        self.ask(ChatRequest::user(Purpose::Critique, prompt), parse_verdict)
    }

    /// Rewrites a failing tool. The new source must differ from the old.
    pub fn refine(
        &self,
        tool: &GeneratedTool,
        verdict: &CritiqueVerdict,
        exec: &ExecutionResult,
        ctx: &ConfigurationContext,
    ) -> Result<GeneratedTool, ActorError> {
        let listing = exec
            .env_after
            .as_ref()
            .map_or_else(|| ctx.environment.files_and_folders.clone(), |s| s.listing());
        let prompt = render(
            &self.templates.refiner,
            &values(vec![
                ("original_code", tool.source.clone()),
                ("task", ctx.subtask.description.clone()),
                ("error", error_text(exec)),
                ("output", output_text(exec)),
                ("current_working_dir", ctx.working_dir()),
                ("working_dir", ctx.working_dir()),
                ("files_and_folders", listing),
                ("critique", verdict.advice.clone().unwrap_or_else(|| verdict.reasoning.clone())),
            ]),
        )?;
        let refined = self.ask(ChatRequest::user(Purpose::Refine, prompt), parse_generated_tool).map_err(|e| match e {
            ActorError::Backend(_) => e,
            other => ActorError::RefinementFailed(other.to_string()),
        })?;
        if refined.source.trim() == tool.source.trim() {
            return Err(ActorError::NoChangeProduced);
        }
        Ok(refined)
    }

    /// Runs one attempt. Runtime failures that say something about the tool
    /// (timeouts, protocol violations, unreachable services) become failed
    /// results for the critic; infrastructure failures are errors.
    fn execute(&self, work: &Work, invocation: &str, sandbox: &Path) -> Result<ExecutionResult, ActorError> {
        let outcome = match work {
            Work::Script { source, .. } => self.runtime.run_script_tool(source, invocation, sandbox, self.timeouts.script),
            Work::Api { tool } => {
                let endpoint = tool.endpoint().ok_or_else(|| ActorError::NoApiToolAvailable(tool.name.clone()))?;
                match serde_json::from_str::<Value>(invocation) {
                    Ok(payload) => self.runtime.call_api_tool(endpoint, &payload, self.timeouts.api),
                    Err(e) => Err(RuntimeError::InvalidInput(format!("request body is not JSON: {e}"))),
                }
            }
        };
        match outcome {
            Ok(r) => Ok(r),
            Err(RuntimeError::HarnessProtocolViolation { reason, partial }) => {
                let mut r = *partial;
                if !r.stderr.is_empty() && !r.stderr.ends_with('\n') {
                    r.stderr.push('\n');
                }
                r.stderr.push_str(&format!("harness protocol violation: {reason}"));
                Ok(r)
            }
            Err(e @ (RuntimeError::Timeout(_) | RuntimeError::ConnectionFailure(_) | RuntimeError::InvalidInput(_))) => {
                let before = snapshot_environment(sandbox).ok();
                Ok(ExecutionResult::rejected(e.to_string(), before))
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Execute, critique and refine until the critic approves or the
    /// attempt budget runs out. Freshly generated tools that pass with a
    /// score above the cutoff are stored; retrieved tools never are.
    pub fn run_subtask_loop(&self, ctx: &ConfigurationContext) -> Result<SubtaskOutcome, ActorError> {
        let subtask = &ctx.subtask;
        let mut out = SubtaskOutcome::new(&subtask.name);
        let sandbox = ctx.environment.working_dir.as_path();

        let (mut work, mut inv) = match subtask.kind {
            SubtaskKind::Qa => {
                let answer = self.answer_qa(ctx)?;
                out.status = SubtaskStatus::Completed;
                out.attempts = 1;
                out.result = Some(answer);
                return Ok(out);
            }
            SubtaskKind::Code => {
                let hit = ctx.retrieved_tools.iter().find(|t| t.record.kind() == ToolKind::ScriptTool);
                match hit {
                    Some(hit) => {
                        let inv = self.build_invocation(&hit.record, ctx, None)?;
                        let source = hit.record.source().unwrap_or_default().to_string();
                        (Work::Script { name: hit.record.name.clone(), source, fresh: false }, inv)
                    }
                    None => {
                        let g = self.generate_tool(ctx)?;
                        let work = Work::Script { name: sanitize_tool_name(&subtask.name), source: g.source, fresh: true };
                        (work, Invocation { invocation: g.invocation, fake_params: g.fake_params })
                    }
                }
            }
            SubtaskKind::Api => {
                let hit = ctx.retrieved_tools.iter().find(|t| t.record.kind() == ToolKind::ApiTool);
                match hit {
                    Some(hit) => {
                        let inv = self.build_invocation(&hit.record, ctx, None)?;
                        (Work::Api { tool: hit.record.clone() }, inv)
                    }
                    None => {
                        let err = ActorError::NoApiToolAvailable(subtask.name.clone());
                        out.attempts = 1;
                        out.attempt_log.push(AttemptRecord {
                            attempt: 1,
                            tool: String::new(),
                            invocation: String::new(),
                            executed: false,
                            exit_status: -1,
                            output: "None".into(),
                            error: err.to_string(),
                            verdict: CritiqueVerdict::synthesized(
                                format!("{err}; the subtask needs a different route"),
                                true,
                            ),
                        });
                        out.error = Some(err.to_string());
                        return Ok(out);
                    }
                }
            }
        };

        for attempt in 1..=self.max_attempts {
            out.attempts = attempt;
            let (exec, verdict, executed) = if inv.fake_params.is_empty() {
                let exec = self.execute(&work, &inv.invocation, sandbox)?;
                out.executions += 1;
                let verdict = self.critique(&work.code(&inv.invocation), &exec, ctx)?;
                (exec, verdict, true)
            } else {
                let err = ActorError::FakeParamsUnresolved(inv.fake_params.clone());
                let exec = ExecutionResult::rejected(err.to_string(), snapshot_environment(sandbox).ok());
                let verdict = CritiqueVerdict::synthesized(
                    format!("{err}; supply real values from the task description or prerequisite results"),
                    false,
                );
                (exec, verdict, false)
            };
            info!(subtask = %subtask.name, attempt, judge = verdict.judge, score = verdict.score, "attempt judged");
            out.attempt_log.push(AttemptRecord {
                attempt,
                tool: work.name().to_string(),
                invocation: inv.invocation.clone(),
                executed,
                exit_status: exec.exit_status,
                output: output_text(&exec),
                error: error_text(&exec),
                verdict: verdict.clone(),
            });

            if verdict.judge {
                out.status = SubtaskStatus::Completed;
                out.result = Some(result_text(&exec));
                if let Work::Script { name, source, fresh: true } = &work {
                    if gate_persistence(i64::from(verdict.score)).unwrap_or(false) {
                        let description = tool_description(source).unwrap_or_else(|| subtask.description.clone());
                        let mut record =
                            ToolRecord::script(name, description, source, verdict.score, self.repo.embedder())
                                .map_err(RepositoryError::from)?;
                        record.invocation_examples = vec![inv.invocation.clone()];
                        let version = self.repo.store(record)?;
                        info!(tool = %name, version, "tool stored");
                        out.tool_stored = Some(name.clone());
                    }
                }
                return Ok(out);
            }
            if verdict.wants_replan || attempt == self.max_attempts {
                break;
            }

            // Placeholder arguments and service calls are fixed by asking for
            // a new invocation; failing code goes to the refiner.
            let critique = verdict.advice.clone().unwrap_or_else(|| verdict.reasoning.clone());
            let next = match &work {
                Work::Api { tool } => self.build_invocation(tool, ctx, Some(&critique)).map(|i| (None, i)),
                Work::Script { name, source, .. } if !executed => {
                    self.invoke_with(name, source, ctx, Some(&critique)).map(|i| (None, i))
                }
                Work::Script { source, .. } => {
                    let current = GeneratedTool {
                        source: source.clone(),
                        invocation: inv.invocation.clone(),
                        fake_params: inv.fake_params.clone(),
                    };
                    self.refine(&current, &verdict, &exec, ctx).map(|g| {
                        (Some(g.source), Invocation { invocation: g.invocation, fake_params: g.fake_params })
                    })
                }
            };
            match next {
                Ok((new_source, new_inv)) => {
                    out.refinements += 1;
                    if let (Some(s), Work::Script { source, .. }) = (new_source, &mut work) {
                        *source = s;
                    }
                    inv = new_inv;
                }
                Err(e @ ActorError::Backend(_)) => return Err(e),
                Err(e) => {
                    out.error = Some(e.to_string());
                    break;
                }
            }
        }
        Ok(out)
    }

    /// Refinement guard: the loop never refines past the budget.
    pub fn check_budget(&self, attempts: u32) -> Result<(), ActorError> {
        if attempts >= self.max_attempts {
            Err(ActorError::AttemptsExhausted(self.max_attempts))
        } else {
            Ok(())
        }
    }
}
