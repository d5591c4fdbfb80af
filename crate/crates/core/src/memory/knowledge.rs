//! Declarative memory: semantic knowledge and the user profile.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum KnowledgeError {
    #[error("knowledge key must be non-empty")]
    EmptyKey,
    #[error("{path}: {message}")]
    Storage { path: PathBuf, message: String },
}

fn storage(path: &Path, e: impl std::fmt::Display) -> KnowledgeError {
    KnowledgeError::Storage { path: path.to_path_buf(), message: e.to_string() }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KnowledgeSource {
    Os,
    User,
    Internet,
    Trajectory,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KnowledgeEntry {
    pub key: String,
    pub value: String,
    pub source: KnowledgeSource,
    pub timestamp: DateTime<Utc>,
}

impl KnowledgeEntry {
    pub fn new(key: impl Into<String>, value: impl Into<String>, source: KnowledgeSource) -> Self {
        Self { key: key.into(), value: value.into(), source, timestamp: Utc::now() }
    }
}

/// Append-only JSON-lines store. Later entries for a key shadow earlier ones.
#[derive(Debug, Default)]
pub struct KnowledgeStore {
    path: Option<PathBuf>,
    entries: RwLock<Vec<KnowledgeEntry>>,
}

impl KnowledgeStore {
    pub fn in_memory() -> Self {
        Self::default()
    }

    pub fn open(path: impl Into<PathBuf>) -> Result<Self, KnowledgeError> {
        let path = path.into();
        let mut entries = Vec::new();
        if path.exists() {
            let text = fs::read_to_string(&path).map_err(|e| storage(&path, e))?;
            for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
                let entry: KnowledgeEntry =
                    serde_json::from_str(line).map_err(|e| storage(&path, format!("line {}: {e}", i + 1)))?;
                entries.push(entry);
            }
        }
        Ok(Self { path: Some(path), entries: RwLock::new(entries) })
    }

    pub fn insert(&self, entry: KnowledgeEntry) -> Result<(), KnowledgeError> {
        if entry.key.trim().is_empty() {
            return Err(KnowledgeError::EmptyKey);
        }
        let mut entries = self.entries.write().expect("knowledge lock");
        if let Some(path) = &self.path {
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).map_err(|e| storage(parent, e))?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path).map_err(|e| storage(path, e))?;
            let line = serde_json::to_string(&entry).expect("knowledge entries serialize");
            writeln!(f, "{line}").map_err(|e| storage(path, e))?;
        }
        entries.push(entry);
        Ok(())
    }

    pub fn latest(&self, key: &str) -> Option<KnowledgeEntry> {
        self.entries.read().expect("knowledge lock").iter().rev().find(|e| e.key == key).cloned()
    }

    pub fn entries(&self) -> Vec<KnowledgeEntry> {
        self.entries.read().expect("knowledge lock").clone()
    }
}

/// User preferences. Loaded from a static JSON file; nothing learns them.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserProfile {
    #[serde(default)]
    pub preferences: BTreeMap<String, String>,
}

impl UserProfile {
    /// A missing file is an empty profile.
    pub fn load(path: &Path) -> Result<Self, KnowledgeError> {
        if !path.exists() {
            return Ok(Self::default());
        }
        let text = fs::read_to_string(path).map_err(|e| storage(path, e))?;
        serde_json::from_str(&text).map_err(|e| storage(path, e))
    }

    pub fn save(&self, path: &Path) -> Result<(), KnowledgeError> {
        let json = serde_json::to_string_pretty(self).expect("profile serializes");
        fs::write(path, json).map_err(|e| storage(path, e))
    }

    pub fn snippet(&self) -> String {
        if self.preferences.is_empty() {
            return "None".to_string();
        }
        self.preferences.iter().map(|(k, v)| format!("{k}: {v}")).collect::<Vec<_>>().join("\n")
    }
}
