//! Plan-of-record data model.
//!
//! A [`TaskGraph`] is a DAG of named [`Subtask`]s. Edges point from a
//! dependency to its dependent: a subtask may only start once every name in
//! its `dependencies` set has reached [`SubtaskStatus::Completed`].
//!
//! Scheduling is level-based: [`TaskGraph::topological_waves`] groups nodes
//! by the length of their longest dependency chain, so every wave can run
//! concurrently once the previous waves are done.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

/// Execution route the planner assigns to a subtask.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SubtaskKind {
    /// Calls a POST tool service.
    Api,
    /// Runs a script tool in the sandbox.
    Code,
    /// Answered directly by the model.
    Qa,
}

impl SubtaskKind {
    /// Case-insensitive mapping from the planner's `type` field.
    pub fn parse(raw: &str) -> Option<Self> {
        match raw.trim().to_ascii_lowercase().as_str() {
            "api" => Some(Self::Api),
            "code" => Some(Self::Code),
            "qa" => Some(Self::Qa),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Api => "API",
            Self::Code => "Code",
            Self::Qa => "QA",
        }
    }
}

impl fmt::Display for SubtaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for SubtaskKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for SubtaskKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(d)?;
        Self::parse(&raw)
            .ok_or_else(|| serde::de::Error::custom(format!("unknown subtask type `{raw}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SubtaskStatus {
    Pending,
    Ready,
    Running,
    Completed,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Subtask {
    pub name: String,
    pub description: String,
    pub kind: SubtaskKind,
    pub dependencies: BTreeSet<String>,
    pub status: SubtaskStatus,
    /// Output summary handed to successors. Present once Completed.
    pub result: Option<String>,
    /// Attempts consumed by the execute/critique/refine loop.
    pub attempts: u32,
}

impl Subtask {
    pub fn new<I, S>(name: impl Into<String>, description: impl Into<String>, kind: SubtaskKind, deps: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            name: name.into(),
            description: description.into(),
            kind,
            dependencies: deps.into_iter().map(Into::into).collect(),
            status: SubtaskStatus::Pending,
            result: None,
            attempts: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("dependency cycle among subtasks {0:?}")]
    CycleDetected(Vec<String>),
    #[error("subtask `{from}` depends on unknown subtask `{to}`")]
    UnknownDependency { from: String, to: String },
    #[error("duplicate subtask name `{0}`")]
    DuplicateName(String),
    #[error("subtask name must be non-empty")]
    EmptyName,
    #[error("subtask keyed `{key}` is named `{name}`")]
    NameMismatch { key: String, name: String },
    #[error("subtask `{0}` has already run and cannot be modified")]
    ImmutableNode(String),
    #[error("no subtask named `{0}`")]
    UnknownSubtask(String),
    #[error("completed subtask `{0}` has no result")]
    MissingResult(String),
    #[error("plan schema violation at `{0}`")]
    SchemaViolation(String),
    #[error("unknown subtask type `{0}`")]
    UnknownKind(String),
}

/// Description/dependency rewrite for an existing subtask.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubtaskEdit {
    pub description: Option<String>,
    pub dependencies: Option<BTreeSet<String>>,
}

/// Restructuring requested after a failed critique.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplanPatch {
    pub add: Vec<Subtask>,
    pub modify: BTreeMap<String, SubtaskEdit>,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskGraph {
    pub root_request: String,
    pub nodes: BTreeMap<String, Subtask>,
}

impl TaskGraph {
    pub fn empty(root_request: impl Into<String>) -> Self {
        Self { root_request: root_request.into(), nodes: BTreeMap::new() }
    }

    /// Builds and validates a graph from a list of subtasks.
    pub fn from_subtasks(
        root_request: impl Into<String>,
        subtasks: impl IntoIterator<Item = Subtask>,
    ) -> Result<Self, GraphError> {
        let mut graph = Self::empty(root_request);
        for task in subtasks {
            if graph.nodes.contains_key(&task.name) {
                return Err(GraphError::DuplicateName(task.name));
            }
            graph.nodes.insert(task.name.clone(), task);
        }
        graph.validate()?;
        Ok(graph)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Subtask> {
        self.nodes.get(name)
    }

    /// Checks every structural invariant, reporting the first violation in
    /// name order. Cycles are reported after all names resolve.
    pub fn validate(&self) -> Result<(), GraphError> {
        for (key, task) in &self.nodes {
            if task.name.is_empty() {
                return Err(GraphError::EmptyName);
            }
            if *key != task.name {
                return Err(GraphError::NameMismatch { key: key.clone(), name: task.name.clone() });
            }
            if task.status == SubtaskStatus::Completed && task.result.is_none() {
                return Err(GraphError::MissingResult(task.name.clone()));
            }
            for dep in &task.dependencies {
                if dep == &task.name {
                    return Err(GraphError::CycleDetected(vec![task.name.clone()]));
                }
                if !self.nodes.contains_key(dep) {
                    return Err(GraphError::UnknownDependency { from: task.name.clone(), to: dep.clone() });
                }
            }
        }
        match self.find_cycle() {
            Some(cycle) => Err(GraphError::CycleDetected(cycle)),
            None => Ok(()),
        }
    }

    /// Returns the members of one dependency cycle, sorted, if any exists.
    fn find_cycle(&self) -> Option<Vec<String>> {
        #[derive(Clone, Copy, PartialEq)]
        enum Mark {
            Fresh,
            OnStack,
            Done,
        }
        let mut marks: BTreeMap<&str, Mark> = self.nodes.keys().map(|k| (k.as_str(), Mark::Fresh)).collect();

        for start in self.nodes.keys() {
            if marks[start.as_str()] != Mark::Fresh {
                continue;
            }
            // Iterative DFS over dependency edges; `path` mirrors the stack.
            let mut path: Vec<&str> = vec![start];
            let mut iters: Vec<std::collections::btree_set::Iter<'_, String>> =
                vec![self.nodes[start].dependencies.iter()];
            marks.insert(start, Mark::OnStack);
            while let Some(iter) = iters.last_mut() {
                match iter.next() {
                    Some(dep) => {
                        let Some(node) = self.nodes.get(dep) else { continue };
                        match marks[dep.as_str()] {
                            Mark::Fresh => {
                                marks.insert(dep, Mark::OnStack);
                                path.push(dep);
                                iters.push(node.dependencies.iter());
                            }
                            Mark::OnStack => {
                                let pos = path.iter().position(|p| *p == dep).unwrap_or(0);
                                let mut cycle: Vec<String> = path[pos..].iter().map(|s| s.to_string()).collect();
                                cycle.sort();
                                return Some(cycle);
                            }
                            Mark::Done => {}
                        }
                    }
                    None => {
                        if let Some(done) = path.pop() {
                            marks.insert(done, Mark::Done);
                        }
                        iters.pop();
                    }
                }
            }
        }
        None
    }

    fn deps_completed(&self, task: &Subtask) -> bool {
        task.dependencies
            .iter()
            .all(|d| self.nodes.get(d).is_some_and(|n| n.status == SubtaskStatus::Completed))
    }

    /// Status with `Ready` derived for pending nodes whose dependencies are done.
    pub fn effective_status(&self, name: &str) -> Option<SubtaskStatus> {
        let task = self.nodes.get(name)?;
        Some(match task.status {
            SubtaskStatus::Pending | SubtaskStatus::Ready if self.deps_completed(task) => SubtaskStatus::Ready,
            SubtaskStatus::Ready => SubtaskStatus::Pending,
            other => other,
        })
    }

    /// Pending nodes whose dependencies are all Completed, sorted by name.
    pub fn ready_set(&self) -> Vec<String> {
        self.nodes
            .values()
            .filter(|t| matches!(t.status, SubtaskStatus::Pending | SubtaskStatus::Ready))
            .filter(|t| self.deps_completed(t))
            .map(|t| t.name.clone())
            .collect()
    }

    /// Groups nodes by longest dependency-chain length. Wave `k` holds every
    /// node whose longest chain of predecessors has `k` edges.
    pub fn topological_waves(&self) -> Result<Vec<Vec<String>>, GraphError> {
        if let Some(cycle) = self.find_cycle() {
            return Err(GraphError::CycleDetected(cycle));
        }
        let mut level: BTreeMap<&str, usize> = BTreeMap::new();
        // Kahn's algorithm; a node's level is fixed once all of its deps are.
        let mut indegree: BTreeMap<&str, usize> = BTreeMap::new();
        let mut dependents: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for task in self.nodes.values() {
            let known = task.dependencies.iter().filter(|d| self.nodes.contains_key(*d));
            indegree.insert(&task.name, known.clone().count());
            for dep in known {
                dependents.entry(dep.as_str()).or_default().push(&task.name);
            }
        }
        let mut frontier: Vec<&str> = indegree.iter().filter(|(_, d)| **d == 0).map(|(n, _)| *n).collect();
        for n in &frontier {
            level.insert(n, 0);
        }
        while let Some(node) = frontier.pop() {
            let here = level[node];
            for &next in dependents.get(node).map(Vec::as_slice).unwrap_or(&[]) {
                let slot = level.entry(next).or_insert(0);
                *slot = (*slot).max(here + 1);
                let d = indegree.get_mut(next).expect("indexed above");
                *d -= 1;
                if *d == 0 {
                    frontier.push(next);
                }
            }
        }
        let depth = level.values().copied().max().map_or(0, |m| m + 1);
        let mut waves = vec![Vec::new(); depth];
        for (name, lvl) in level {
            waves[lvl].push(name.to_string());
        }
        Ok(waves)
    }

    /// Names of subtasks that list `name` as a dependency.
    pub fn successors(&self, name: &str) -> Vec<&Subtask> {
        self.nodes.values().filter(|t| t.dependencies.contains(name)).collect()
    }

    /// Subtasks nothing else depends on.
    pub fn leaves(&self) -> Vec<&Subtask> {
        self.nodes
            .values()
            .filter(|t| !self.nodes.values().any(|o| o.dependencies.contains(&t.name)))
            .collect()
    }

    /// Returns a new graph with `patch` applied and revalidated.
    ///
    /// Completed and running nodes are immutable. A Failed node that the
    /// patch modifies is reset to Pending with a fresh attempt budget.
    pub fn apply_patch(&self, patch: &ReplanPatch) -> Result<TaskGraph, GraphError> {
        let mut next = self.clone();
        for (name, edit) in &patch.modify {
            let task = next.nodes.get_mut(name).ok_or_else(|| GraphError::UnknownSubtask(name.clone()))?;
            match task.status {
                SubtaskStatus::Pending | SubtaskStatus::Ready => {}
                SubtaskStatus::Failed => {
                    task.status = SubtaskStatus::Pending;
                    task.attempts = 0;
                    task.result = None;
                }
                SubtaskStatus::Running | SubtaskStatus::Completed => {
                    return Err(GraphError::ImmutableNode(name.clone()));
                }
            }
            if let Some(desc) = &edit.description {
                task.description = desc.clone();
            }
            if let Some(deps) = &edit.dependencies {
                task.dependencies = deps.clone();
            }
        }
        for added in &patch.add {
            if next.nodes.contains_key(&added.name) {
                return Err(GraphError::DuplicateName(added.name.clone()));
            }
            let mut fresh = added.clone();
            fresh.status = SubtaskStatus::Pending;
            fresh.result = None;
            fresh.attempts = 0;
            next.nodes.insert(fresh.name.clone(), fresh);
        }
        next.validate()?;
        Ok(next)
    }

    pub fn set_status(&mut self, name: &str, status: SubtaskStatus) -> Result<(), GraphError> {
        let task = self.nodes.get_mut(name).ok_or_else(|| GraphError::UnknownSubtask(name.to_string()))?;
        task.status = status;
        Ok(())
    }

    pub fn complete(&mut self, name: &str, result: String, attempts: u32) -> Result<(), GraphError> {
        let task = self.nodes.get_mut(name).ok_or_else(|| GraphError::UnknownSubtask(name.to_string()))?;
        task.status = SubtaskStatus::Completed;
        task.result = Some(result);
        task.attempts = attempts;
        Ok(())
    }

    pub fn fail(&mut self, name: &str, attempts: u32) -> Result<(), GraphError> {
        let task = self.nodes.get_mut(name).ok_or_else(|| GraphError::UnknownSubtask(name.to_string()))?;
        task.status = SubtaskStatus::Failed;
        task.attempts = attempts;
        Ok(())
    }

    pub fn all_completed(&self) -> bool {
        self.nodes.values().all(|t| t.status == SubtaskStatus::Completed)
    }

    /// The planner-facing JSON form: an object keyed by subtask name with
    /// `name`, `description`, `dependencies` and `type` per entry.
    pub fn to_plan_json(&self) -> Value {
        let mut map = Map::new();
        for task in self.nodes.values() {
            map.insert(task.name.clone(), subtask_plan_json(task));
        }
        Value::Object(map)
    }

    /// Parses the planner-facing JSON form and validates the result.
    pub fn from_plan_json(root_request: impl Into<String>, value: &Value) -> Result<Self, GraphError> {
        let subtasks = subtasks_from_plan_object(value)?;
        Self::from_subtasks(root_request, subtasks)
    }
}

fn subtask_plan_json(task: &Subtask) -> Value {
    serde_json::json!({
        "name": task.name,
        "description": task.description,
        "dependencies": task.dependencies.iter().collect::<Vec<_>>(),
        "type": task.kind.as_str(),
    })
}

/// Reads `{name: {name, description, dependencies, type}}` entries in
/// document order. Does not check graph structure.
pub fn subtasks_from_plan_object(value: &Value) -> Result<Vec<Subtask>, GraphError> {
    let obj = value.as_object().ok_or_else(|| GraphError::SchemaViolation("<root>".into()))?;
    let mut out = Vec::with_capacity(obj.len());
    for (key, entry) in obj {
        out.push(subtask_from_plan_entry(key, entry)?);
    }
    Ok(out)
}

fn subtask_from_plan_entry(key: &str, entry: &Value) -> Result<Subtask, GraphError> {
    let field = |f: &str| format!("{key}.{f}");
    let obj = entry.as_object().ok_or_else(|| GraphError::SchemaViolation(key.to_string()))?;

    let name = match obj.get("name") {
        None => key.to_string(),
        Some(Value::String(n)) if n == key => n.clone(),
        Some(Value::String(n)) => {
            return Err(GraphError::NameMismatch { key: key.to_string(), name: n.clone() });
        }
        Some(_) => return Err(GraphError::SchemaViolation(field("name"))),
    };
    if name.trim().is_empty() {
        return Err(GraphError::EmptyName);
    }
    let description = obj
        .get("description")
        .and_then(Value::as_str)
        .ok_or_else(|| GraphError::SchemaViolation(field("description")))?
        .to_string();
    let dependencies = match obj.get("dependencies") {
        None | Some(Value::Null) => BTreeSet::new(),
        Some(Value::Array(items)) => items
            .iter()
            .map(|d| d.as_str().map(str::to_string))
            .collect::<Option<BTreeSet<_>>>()
            .ok_or_else(|| GraphError::SchemaViolation(field("dependencies")))?,
        Some(_) => return Err(GraphError::SchemaViolation(field("dependencies"))),
    };
    let raw_kind =
        obj.get("type").and_then(Value::as_str).ok_or_else(|| GraphError::SchemaViolation(field("type")))?;
    let kind = SubtaskKind::parse(raw_kind).ok_or_else(|| GraphError::UnknownKind(raw_kind.to_string()))?;

    Ok(Subtask {
        name,
        description,
        kind,
        dependencies,
        status: SubtaskStatus::Pending,
        result: None,
        attempts: 0,
    })
}
