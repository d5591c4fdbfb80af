//! Working memory: per-subtask context assembled from the long-term stores
//! and the live sandbox.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::knowledge::{KnowledgeStore, UserProfile};
use super::repository::{RepositoryError, ScoredTool, ToolKind, ToolRepository};
use crate::env::{snapshot_environment, EnvError, EnvSnapshot};
use crate::taskgraph::{Subtask, SubtaskKind, SubtaskStatus, TaskGraph};

pub const DEFAULT_TOP_K: usize = 5;
pub const DEFAULT_THRESHOLD: f64 = 0.75;

/// Knowledge keys consulted for environment facts.
pub const KEY_SYSTEM_VERSION: &str = "system_version";
pub const KEY_SYSTEM_LANGUAGE: &str = "system_language";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfiguratorSettings {
    pub top_k: usize,
    /// Minimum cosine similarity for a retrieved tool.
    pub threshold: f64,
    /// Pins the reported system version over knowledge and the live host.
    pub system_version: Option<String>,
    pub system_language: Option<String>,
}

impl Default for ConfiguratorSettings {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K, threshold: DEFAULT_THRESHOLD, system_version: None, system_language: None }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Environment {
    pub system_version: String,
    pub system_language: String,
    pub working_dir: PathBuf,
    /// Timestamp-free listing of the working directory.
    pub files_and_folders: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigurationContext {
    pub request: String,
    pub subtask: Subtask,
    pub retrieved_tools: Vec<ScoredTool>,
    pub environment: Environment,
    /// Results of completed dependencies, keyed by subtask name.
    pub prerequisite_outputs: BTreeMap<String, String>,
    pub profile_snippet: String,
    /// `(name, description)` of subtasks waiting on this one.
    pub successor_tasks: Vec<(String, String)>,
}

impl ConfigurationContext {
    pub fn pre_tasks_info(&self) -> String {
        if self.prerequisite_outputs.is_empty() {
            return "None".to_string();
        }
        self.prerequisite_outputs.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join("\n")
    }

    pub fn next_action(&self) -> String {
        if self.successor_tasks.is_empty() {
            return "None".to_string();
        }
        self.successor_tasks.iter().map(|(n, d)| format!("{n}: {d}")).collect::<Vec<_>>().join("\n")
    }

    pub fn working_dir(&self) -> String {
        self.environment.working_dir.display().to_string()
    }
}

/// Inputs to the planner prompt. Missing fields surface as unfilled
/// placeholders when the prompt is rendered.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanningContext {
    pub system_version: Option<String>,
    pub working_dir: Option<String>,
    pub files_and_folders: Option<String>,
    /// `(name, description)` of script tools.
    pub action_list: Vec<(String, String)>,
    /// `(name, description)` of API tools.
    pub api_list: Vec<(String, String)>,
}

#[derive(Debug, Error)]
pub enum AssembleError {
    #[error("dependency `{0}` has not completed")]
    DependencyIncomplete(String),
    #[error("no subtask named `{0}`")]
    UnknownSubtask(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Repository(#[from] RepositoryError),
}

/// The long-term stores plus retrieval settings.
pub struct Memory {
    pub repo: Arc<ToolRepository>,
    pub knowledge: Arc<KnowledgeStore>,
    pub profile: UserProfile,
    pub settings: ConfiguratorSettings,
}

impl Memory {
    pub fn new(repo: Arc<ToolRepository>, knowledge: Arc<KnowledgeStore>, profile: UserProfile) -> Self {
        Self { repo, knowledge, profile, settings: ConfiguratorSettings::default() }
    }

    pub fn with_settings(mut self, settings: ConfiguratorSettings) -> Self {
        self.settings = settings;
        self
    }

    /// Environment facts: settings override knowledge, knowledge overrides
    /// the live host.
    pub fn environment(&self, sandbox: &Path) -> Result<(Environment, EnvSnapshot), EnvError> {
        let snap = snapshot_environment(sandbox)?;
        let fact = |pinned: &Option<String>, key: &str| {
            pinned.clone().or_else(|| self.knowledge.latest(key).map(|e| e.value))
        };
        let env = Environment {
            system_version: fact(&self.settings.system_version, KEY_SYSTEM_VERSION)
                .unwrap_or_else(|| snap.os_version.clone()),
            system_language: fact(&self.settings.system_language, KEY_SYSTEM_LANGUAGE)
                .unwrap_or_else(|| "English".to_string()),
            working_dir: snap.working_dir.clone(),
            files_and_folders: snap.listing(),
        };
        Ok((env, snap))
    }

    pub fn planning_context(&self, sandbox: &Path) -> Result<PlanningContext, EnvError> {
        let (env, _) = self.environment(sandbox)?;
        let tools = self.repo.list();
        let of_kind = |k: ToolKind| {
            tools.iter().filter(|t| t.kind() == k).map(|t| (t.name.clone(), t.description.clone())).collect()
        };
        Ok(PlanningContext {
            system_version: Some(env.system_version),
            working_dir: Some(env.working_dir.display().to_string()),
            files_and_folders: Some(env.files_and_folders),
            action_list: of_kind(ToolKind::ScriptTool),
            api_list: of_kind(ToolKind::ApiTool),
        })
    }

    pub fn assemble(&self, graph: &TaskGraph, name: &str, sandbox: &Path) -> Result<ConfigurationContext, AssembleError> {
        assemble(graph, name, self, sandbox)
    }
}

/// Gathers everything the actor needs for one Ready subtask.
///
/// Tools are retrieved by the subtask description and restricted to the
/// kind the subtask can use: script tools for Code, API tools for API,
/// none for QA.
pub fn assemble(
    graph: &TaskGraph,
    name: &str,
    memory: &Memory,
    sandbox: &Path,
) -> Result<ConfigurationContext, AssembleError> {
    let subtask = graph.get(name).ok_or_else(|| AssembleError::UnknownSubtask(name.to_string()))?;
    let mut prerequisite_outputs = BTreeMap::new();
    for dep in &subtask.dependencies {
        match graph.get(dep) {
            Some(t) if t.status == SubtaskStatus::Completed => {
                prerequisite_outputs.insert(dep.clone(), t.result.clone().unwrap_or_default());
            }
            _ => return Err(AssembleError::DependencyIncomplete(dep.clone())),
        }
    }
    let kind = match subtask.kind {
        SubtaskKind::Code => Some(ToolKind::ScriptTool),
        SubtaskKind::Api => Some(ToolKind::ApiTool),
        SubtaskKind::Qa => None,
    };
    let retrieved_tools = match kind {
        Some(k) => memory.repo.retrieve_kind(&subtask.description, memory.settings.top_k, memory.settings.threshold, Some(k))?,
        None => Vec::new(),
    };
    let (environment, _) = memory.environment(sandbox)?;
    Ok(ConfigurationContext {
        request: graph.root_request.clone(),
        subtask: subtask.clone(),
        retrieved_tools,
        environment,
        prerequisite_outputs,
        profile_snippet: memory.profile.snippet(),
        successor_tasks: graph.successors(name).into_iter().map(|t| (t.name.clone(), t.description.clone())).collect(),
    })
}
