//! Run manifests: everything besides the transcript needed to re-run a
//! recorded task elsewhere and compare reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{sandbox_keyer, Agent, AgentConfig, AgentError, RunReport};
use crate::env::HARNESS_DIR;
use crate::llm::{ReplayBackend, TranscriptError};
use crate::memory::{
    ConfiguratorSettings, HashEmbedder, KnowledgeEntry, KnowledgeError, KnowledgeStore, Memory, RepositoryError,
    ToolRecord, ToolRepository, UserProfile,
};
use crate::runtime::Runtime;
use crate::template::TemplateSet;

#[derive(Debug, Error)]
pub enum ManifestError {
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("manifest is malformed: {0}")]
    Malformed(String),
    #[error(transparent)]
    Repository(#[from] RepositoryError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
}

fn io(path: &Path, e: impl std::fmt::Display) -> ManifestError {
    ManifestError::Io { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub request: String,
    pub settings: ConfiguratorSettings,
    pub parallel: usize,
    pub max_attempts: u32,
    pub patch_limit: u32,
    /// Repository contents before the run.
    pub tools: Vec<ToolRecord>,
    pub knowledge: Vec<KnowledgeEntry>,
    pub profile: UserProfile,
    /// Sandbox directories before the run, relative.
    pub sandbox_dirs: Vec<String>,
    /// Sandbox files before the run, relative path to base64 contents.
    pub sandbox_files: BTreeMap<String, String>,
    /// The report the recorded run produced, if it got past planning.
    pub report: Option<RunReport>,
}

impl RunManifest {
    /// Snapshot of the inputs of a run that is about to start.
    pub fn capture(request: &str, memory: &Memory, config: &AgentConfig) -> Result<Self, ManifestError> {
        let mut dirs = Vec::new();
        let mut files = BTreeMap::new();
        walk(&config.sandbox, &config.sandbox, &mut dirs, &mut files)?;
        Ok(Self {
            request: request.to_string(),
            settings: memory.settings.clone(),
            parallel: config.parallel,
            max_attempts: config.max_attempts,
            patch_limit: config.patch_limit,
            tools: memory.repo.list(),
            knowledge: memory.knowledge.entries(),
            profile: memory.profile.clone(),
            sandbox_dirs: dirs,
            sandbox_files: files,
            report: None,
        })
    }

    /// `<transcript>.manifest.json`
    pub fn sidecar_path(transcript: &Path) -> PathBuf {
        let mut name = transcript.as_os_str().to_owned();
        name.push(".manifest.json");
        PathBuf::from(name)
    }

    pub fn save(&self, path: &Path) -> Result<(), ManifestError> {
        let json = serde_json::to_string_pretty(self).expect("manifests serialize");
        fs::write(path, json + "\n").map_err(|e| io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
        serde_json::from_str(&text).map_err(|e| ManifestError::Malformed(e.to_string()))
    }

    /// Recreates the memory root and sandbox under `root`.
    pub fn restore(&self, root: &Path) -> Result<(Memory, PathBuf), ManifestError> {
        let sandbox = root.join("sandbox");
        fs::create_dir_all(&sandbox).map_err(|e| io(&sandbox, e))?;
        for d in &self.sandbox_dirs {
            let p = sandbox.join(d);
            fs::create_dir_all(&p).map_err(|e| io(&p, e))?;
        }
        for (rel, b64) in &self.sandbox_files {
            let p = sandbox.join(rel);
            let bytes = STANDARD.decode(b64).map_err(|e| ManifestError::Malformed(format!("{rel}: {e}")))?;
            if let Some(parent) = p.parent() {
                fs::create_dir_all(parent).map_err(|e| io(parent, e))?;
            }
            fs::write(&p, bytes).map_err(|e| io(&p, e))?;
        }
        let repo = ToolRepository::open(root.join("memory"), Arc::new(HashEmbedder::default()))?;
        for tool in &self.tools {
            repo.store(tool.clone())?;
        }
        let knowledge = KnowledgeStore::in_memory();
        for entry in &self.knowledge {
            knowledge.insert(entry.clone())?;
        }
        let memory = Memory::new(Arc::new(repo), Arc::new(knowledge), self.profile.clone())
            .with_settings(self.settings.clone());
        Ok((memory, sandbox))
    }

    pub fn agent_config(&self, sandbox: PathBuf) -> AgentConfig {
        AgentConfig {
            parallel: self.parallel,
            max_attempts: self.max_attempts,
            patch_limit: self.patch_limit,
            ..AgentConfig::new(sandbox)
        }
    }
}

fn walk(
    root: &Path,
    dir: &Path,
    dirs: &mut Vec<String>,
    files: &mut BTreeMap<String, String>,
) -> Result<(), ManifestError> {
    let mut entries: Vec<_> = fs::read_dir(dir).map_err(|e| io(dir, e))?.filter_map(Result::ok).collect();
    entries.sort_by_key(|e| e.file_name());
    for entry in entries {
        let path = entry.path();
        let rel = path.strip_prefix(root).expect("walk stays under root").to_string_lossy().replace('\\', "/");
        if rel == HARNESS_DIR {
            continue;
        }
        let ft = entry.file_type().map_err(|e| io(&path, e))?;
        if ft.is_dir() {
            dirs.push(rel);
            walk(root, &path, dirs, files)?;
        } else if ft.is_file() {
            let bytes = fs::read(&path).map_err(|e| io(&path, e))?;
            files.insert(rel, STANDARD.encode(bytes));
        }
    }
    Ok(())
}

/// Result of re-running a manifest against its transcript.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayOutcome {
    pub expected: Option<RunReport>,
    pub actual: Option<RunReport>,
    /// Error text when the replayed run produced no report.
    pub error: Option<String>,
}

impl ReplayOutcome {
    pub fn matches(&self) -> bool {
        self.expected.is_some() && self.expected == self.actual
    }

    /// Line diff of the two reports' JSON, empty when they match.
    pub fn diff(&self) -> Vec<String> {
        let render = |r: &Option<RunReport>| r.as_ref().map(RunReport::to_json).unwrap_or_default();
        let (a, b) = (render(&self.expected), render(&self.actual));
        let (a, b): (Vec<&str>, Vec<&str>) = (a.lines().collect(), b.lines().collect());
        let mut out = Vec::new();
        for i in 0..a.len().max(b.len()) {
            match (a.get(i), b.get(i)) {
                (Some(x), Some(y)) if x == y => {}
                (x, y) => {
                    if let Some(x) = x {
                        out.push(format!("-{x}"));
                    }
                    if let Some(y) = y {
                        out.push(format!("+{y}"));
                    }
                }
            }
        }
        out
    }
}

/// Rebuilds the recorded run under `workdir` and replays it.
pub fn replay_manifest(
    manifest: &RunManifest,
    transcript: &Path,
    templates: Arc<TemplateSet>,
    runtime: Arc<dyn Runtime>,
    workdir: &Path,
) -> Result<ReplayOutcome, ManifestError> {
    let (memory, sandbox) = manifest.restore(workdir)?;
    let backend = ReplayBackend::from_file(transcript, sandbox_keyer(&sandbox))?;
    let agent = Agent::new(Arc::new(backend), runtime, Arc::new(memory), templates, manifest.agent_config(sandbox));
    let (actual, error) = match agent.run_task(&manifest.request) {
        Ok(r) => (Some(r), None),
        Err(AgentError::TaskFailed(r)) => (Some(*r), None),
        Err(e) => (None, Some(e.to_string())),
    };
    Ok(ReplayOutcome { expected: manifest.report.clone(), actual, error })
}
