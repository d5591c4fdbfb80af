//! Self-directed learning: propose an easy-to-hard curriculum for an
//! objective and solve it task by task, accumulating tools.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use tracing::{debug, info};

use crate::agent::{Agent, AgentError};
use crate::llm::{extract_json, BackendError, ChatBackend, ChatRequest, Purpose};
use crate::template::{render, TemplateError, TemplateSet};

pub const DEFAULT_TASK_COUNT: usize = 10;
/// Extra curriculum calls after a reply that breaks the schema.
pub const CURRICULUM_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningObjective {
    pub description: String,
    pub task_count: usize,
    pub context_hints: Vec<String>,
}

impl LearningObjective {
    pub fn new(description: impl Into<String>) -> Self {
        Self { description: description.into(), task_count: DEFAULT_TASK_COUNT, context_hints: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumTask {
    /// 1-based position in the curriculum.
    pub index: usize,
    pub request: String,
    pub difficulty_rank: i64,
}

#[derive(Debug, Error)]
pub enum LearningError {
    #[error("task_count must be at least 1")]
    InvalidObjective,
    #[error("curriculum rejected: {0}")]
    CurriculumFailed(String),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Template(#[from] TemplateError),
}

/// Checks a curriculum reply: `{"tasks": [{request, difficulty}]}` with
/// exactly `count` entries in non-decreasing difficulty.
pub fn parse_curriculum(reply: &str, count: usize) -> Result<Vec<CurriculumTask>, String> {
    let v = extract_json(reply).map_err(|e| e.to_string())?;
    let items = v.get("tasks").and_then(Value::as_array).ok_or("reply has no `tasks` array")?;
    if items.len() != count {
        return Err(format!("expected {count} tasks, got {}", items.len()));
    }
    let mut out = Vec::with_capacity(count);
    for (i, item) in items.iter().enumerate() {
        let request = item
            .get("request")
            .and_then(Value::as_str)
            .filter(|r| !r.trim().is_empty())
            .ok_or_else(|| format!("task {} has no request", i + 1))?;
        let difficulty =
            item.get("difficulty").and_then(Value::as_i64).ok_or_else(|| format!("task {} has no integer difficulty", i + 1))?;
        if let Some(prev) = out.last().map(|t: &CurriculumTask| t.difficulty_rank) {
            if difficulty < prev {
                return Err(format!("task {} is easier than the one before it", i + 1));
            }
        }
        out.push(CurriculumTask { index: i + 1, request: request.to_string(), difficulty_rank: difficulty });
    }
    Ok(out)
}

pub fn propose_curriculum(
    templates: &TemplateSet,
    objective: &LearningObjective,
    backend: &dyn ChatBackend,
) -> Result<Vec<CurriculumTask>, LearningError> {
    if objective.task_count == 0 {
        return Err(LearningError::InvalidObjective);
    }
    let hints = if objective.context_hints.is_empty() {
        "None".to_string()
    } else {
        objective.context_hints.iter().map(|h| format!("- {h}")).collect::<Vec<_>>().join("\n")
    };
    let mut values = BTreeMap::new();
    values.insert("objective", objective.description.clone());
    values.insert("task_count", objective.task_count.to_string());
    values.insert("context_hints", hints);
    let mut request = ChatRequest::user(Purpose::Curriculum, render(&templates.curriculum, &values)?);
    let mut tries = 0;
    loop {
        let reply = backend.complete(&request)?;
        match parse_curriculum(&reply, objective.task_count) {
            Ok(tasks) => return Ok(tasks),
            Err(e) if tries < CURRICULUM_RETRIES => {
                debug!(error = %e, "curriculum rejected, asking again");
                tries += 1;
                request = request.with_feedback(&reply, format!("The curriculum could not be used: {e}. Reply again."));
            }
            Err(e) => return Err(LearningError::CurriculumFailed(e)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskOutcome {
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningTaskReport {
    pub index: usize,
    pub request: String,
    pub outcome: TaskOutcome,
    pub tools_added: Vec<String>,
    /// Repository size after the task.
    pub repo_size: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LearningReport {
    pub objective: String,
    pub tasks: Vec<LearningTaskReport>,
    pub tools_before: usize,
    pub tools_after: usize,
}

impl LearningReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports serialize")
    }

    pub fn tools_accumulated(&self) -> usize {
        self.tools_after - self.tools_before
    }
}

/// Runs every task in index order. A failed task is recorded and the
/// curriculum continues.
pub fn run_curriculum(objective: &str, tasks: &[CurriculumTask], agent: &Agent) -> LearningReport {
    let repo = &agent.memory().repo;
    let tools_before = repo.len();
    let mut reports = Vec::with_capacity(tasks.len());
    let mut ordered: Vec<&CurriculumTask> = tasks.iter().collect();
    ordered.sort_by_key(|t| t.index);
    for task in ordered {
        info!(index = task.index, request = %task.request, "curriculum task");
        let (outcome, tools_added, error) = match agent.run_task(&task.request) {
            Ok(r) => (TaskOutcome::Completed, r.tools_added, None),
            Err(AgentError::TaskFailed(r)) => (TaskOutcome::Failed, r.tools_added.clone(), r.failure.clone()),
            Err(e) => (TaskOutcome::Failed, Vec::new(), Some(e.to_string())),
        };
        reports.push(LearningTaskReport {
            index: task.index,
            request: task.request.clone(),
            outcome,
            tools_added,
            repo_size: repo.len(),
            error,
        });
    }
    LearningReport { objective: objective.to_string(), tasks: reports, tools_before, tools_after: repo.len() }
}
