//! Request decomposition into a validated task graph, and replan patches.

use std::collections::{BTreeMap, BTreeSet};

use serde_json::{Map, Value};
use thiserror::Error;
use tracing::debug;

use crate::actor::CritiqueVerdict;
use crate::llm::{extract_json, BackendError, ChatBackend, ChatRequest, ExtractError, Purpose};
use crate::memory::PlanningContext;
use crate::taskgraph::{subtasks_from_plan_object, GraphError, ReplanPatch, SubtaskEdit, TaskGraph};
use crate::template::{render, TemplateError, TemplateSet};

/// Extra planner calls after an unparseable plan.
pub const PLAN_RETRIES: u32 = 2;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("planner prompt is missing a value for `{0}`")]
    MissingPlaceholder(String),
    #[error("no JSON object found in the planner reply")]
    NoJsonFound,
    #[error("plan schema violation: {0}")]
    SchemaViolation(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("planning failed: {0}")]
    PlanningFailed(Box<PlanError>),
    #[error("template error: {0}")]
    Template(TemplateError),
}

impl From<TemplateError> for PlanError {
    fn from(e: TemplateError) -> Self {
        match e {
            TemplateError::MissingPlaceholder(name) => PlanError::MissingPlaceholder(name),
            other => PlanError::Template(other),
        }
    }
}

fn json_error(e: ExtractError) -> PlanError {
    match e {
        ExtractError::ParseError(msg) => PlanError::SchemaViolation(format!("malformed JSON: {msg}")),
        _ => PlanError::NoJsonFound,
    }
}

fn list_or_none(items: &[(String, String)]) -> String {
    if items.is_empty() {
        return "None".to_string();
    }
    items.iter().map(|(n, d)| format!("- {n}: {d}")).collect::<Vec<_>>().join("\n")
}

pub fn build_planner_prompt(templates: &TemplateSet, request: &str, ctx: &PlanningContext) -> Result<String, PlanError> {
    let mut values = BTreeMap::new();
    values.insert("task", request.to_string());
    values.insert("action_list", list_or_none(&ctx.action_list));
    values.insert("api_list", list_or_none(&ctx.api_list));
    for (key, value) in [
        ("system_version", &ctx.system_version),
        ("working_dir", &ctx.working_dir),
        ("files_and_folders", &ctx.files_and_folders),
    ] {
        if let Some(v) = value {
            values.insert(key, v.clone());
        }
    }
    Ok(render(&templates.planner, &values)?)
}

/// Parses a planner reply into a validated graph. Pure in its input.
pub fn parse_plan(request: &str, reply: &str) -> Result<TaskGraph, PlanError> {
    let value = extract_json(reply).map_err(json_error)?;
    if value.as_object().is_some_and(Map::is_empty) {
        return Err(PlanError::SchemaViolation("plan has no subtasks".into()));
    }
    Ok(TaskGraph::from_plan_json(request, &value)?)
}

/// Plans `request`: one backend call, then up to [`PLAN_RETRIES`] more
/// with the parse error fed back.
pub fn plan(
    templates: &TemplateSet,
    request: &str,
    ctx: &PlanningContext,
    backend: &dyn ChatBackend,
) -> Result<TaskGraph, PlanError> {
    let prompt = build_planner_prompt(templates, request, ctx)?;
    let mut chat = ChatRequest::user(Purpose::Plan, prompt);
    let mut tries = 0;
    loop {
        let reply = backend.complete(&chat).map_err(|e| PlanError::PlanningFailed(Box::new(e.into())))?;
        match parse_plan(request, &reply) {
            Ok(graph) => return Ok(graph),
            Err(e) if tries < PLAN_RETRIES => {
                debug!(error = %e, "plan rejected, asking again");
                tries += 1;
                let feedback = format!("The plan could not be used: {e}. Reply again with a corrected JSON plan.");
                chat = chat.with_feedback(&reply, feedback);
            }
            Err(e) => return Err(PlanError::PlanningFailed(Box::new(e))),
        }
    }
}

/// Parses a replan reply.
///
/// The canonical form is `{"add": {plan entries}, "modify": {name: {description?,
/// dependencies?}}, "reason": text}`. Plan entries at the top level are
/// accepted as additions too.
pub fn parse_patch(reply: &str) -> Result<ReplanPatch, PlanError> {
    let value = extract_json(reply).map_err(json_error)?;
    let obj = value.as_object().ok_or_else(|| PlanError::SchemaViolation("patch must be an object".into()))?;
    let mut additions = Map::new();
    if let Some(add) = obj.get("add") {
        let add = add.as_object().ok_or_else(|| PlanError::SchemaViolation("`add` must be an object".into()))?;
        additions.extend(add.clone());
    }
    for (k, v) in obj {
        if !matches!(k.as_str(), "add" | "modify" | "reason") {
            additions.insert(k.clone(), v.clone());
        }
    }
    let add = subtasks_from_plan_object(&Value::Object(additions))?;

    let mut modify = BTreeMap::new();
    if let Some(m) = obj.get("modify") {
        let m = m.as_object().ok_or_else(|| PlanError::SchemaViolation("`modify` must be an object".into()))?;
        for (name, edit) in m {
            let bad = |f: &str| PlanError::SchemaViolation(format!("modify.{name}.{f}"));
            let e = edit.as_object().ok_or_else(|| bad("<entry>"))?;
            let description = match e.get("description") {
                None | Some(Value::Null) => None,
                Some(Value::String(s)) => Some(s.clone()),
                Some(_) => return Err(bad("description")),
            };
            let dependencies = match e.get("dependencies") {
                None | Some(Value::Null) => None,
                Some(Value::Array(items)) => Some(
                    items
                        .iter()
                        .map(|d| d.as_str().map(str::to_string))
                        .collect::<Option<BTreeSet<_>>>()
                        .ok_or_else(|| bad("dependencies"))?,
                ),
                Some(_) => return Err(bad("dependencies")),
            };
            modify.insert(name.clone(), SubtaskEdit { description, dependencies });
        }
    }
    let reason = obj.get("reason").and_then(Value::as_str).unwrap_or_default().to_string();
    if add.is_empty() && modify.is_empty() {
        return Err(PlanError::SchemaViolation("patch changes nothing".into()));
    }
    Ok(ReplanPatch { add, modify, reason })
}

/// Asks for a graph change after `failed` could not be completed. Returns
/// `None` unless the verdict failed the subtask and asked for a new plan.
pub fn propose_patch(
    templates: &TemplateSet,
    verdict: &CritiqueVerdict,
    graph: &TaskGraph,
    failed: &str,
    backend: &dyn ChatBackend,
) -> Result<Option<ReplanPatch>, PlanError> {
    if verdict.judge || !verdict.wants_replan {
        return Ok(None);
    }
    let failed_task = graph
        .get(failed)
        .map(|t| format!("{}: {}", t.name, t.description))
        .ok_or_else(|| GraphError::UnknownSubtask(failed.to_string()))?;
    let graph_json = serde_json::to_string_pretty(&graph.to_plan_json()).expect("plan JSON serializes");
    let mut values = BTreeMap::new();
    values.insert("request", graph.root_request.clone());
    values.insert("graph", graph_json);
    values.insert("failed_task", failed_task);
    values.insert("reasoning", verdict.reasoning.clone());
    let prompt = render(&templates.replan, &values)?;
    let reply = backend.complete(&ChatRequest::user(Purpose::Plan, prompt))?;
    parse_patch(&reply).map(Some)
}
