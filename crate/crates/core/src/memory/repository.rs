//! Procedural memory: the on-disk tool repository.
//!
//! Layout under the repository root:
//!
//! ```text
//! tools/<name>/meta.json      name, description, kind, score, version, created_at, embedding, ...
//! tools/<name>/tool.src       script source (script tools)
//! tools/<name>/endpoint.json  service descriptor (API tools)
//! ```
//!
//! The in-memory index is the source for reads. Writes take a single
//! writer lock, update disk first and then the index.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, SecondsFormat, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::embed::{cosine, l2_norm, EmbedError, Embedder};
use crate::runtime::ApiEndpoint;

pub const TOOLS_DIR: &str = "tools";
/// Similarities closer than this rank as equal.
pub const RANK_RESOLUTION: f64 = 1e-9;
const META_FILE: &str = "meta.json";
const SOURCE_FILE: &str = "tool.src";
const ENDPOINT_FILE: &str = "endpoint.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ToolKind {
    ScriptTool,
    ApiTool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum ToolBody {
    Script(String),
    Api(ApiEndpoint),
}

impl ToolBody {
    pub fn kind(&self) -> ToolKind {
        match self {
            ToolBody::Script(_) => ToolKind::ScriptTool,
            ToolBody::Api(_) => ToolKind::ApiTool,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolRecord {
    pub name: String,
    pub description: String,
    pub body: ToolBody,
    /// Critic generality score, 0 to 10.
    pub score: u8,
    pub embedding: Vec<f32>,
    pub version: u32,
    pub created_at: DateTime<Utc>,
    pub invocation_examples: Vec<String>,
}

impl ToolRecord {
    /// A script tool with its embedding computed from the description.
    pub fn script(
        name: impl Into<String>,
        description: impl Into<String>,
        source: impl Into<String>,
        score: u8,
        embedder: &dyn Embedder,
    ) -> Result<Self, EmbedError> {
        Self::build(name.into(), description.into(), ToolBody::Script(source.into()), score, embedder)
    }

    pub fn api(
        name: impl Into<String>,
        description: impl Into<String>,
        endpoint: ApiEndpoint,
        score: u8,
        embedder: &dyn Embedder,
    ) -> Result<Self, EmbedError> {
        Self::build(name.into(), description.into(), ToolBody::Api(endpoint), score, embedder)
    }

    fn build(name: String, description: String, body: ToolBody, score: u8, e: &dyn Embedder) -> Result<Self, EmbedError> {
        let embedding = e.embed(&description)?;
        Ok(Self {
            name,
            description,
            body,
            score,
            embedding,
            version: 1,
            created_at: Utc::now(),
            invocation_examples: Vec::new(),
        })
    }

    pub fn kind(&self) -> ToolKind {
        self.body.kind()
    }

    pub fn source(&self) -> Option<&str> {
        match &self.body {
            ToolBody::Script(s) => Some(s),
            ToolBody::Api(_) => None,
        }
    }

    pub fn endpoint(&self) -> Option<&ApiEndpoint> {
        match &self.body {
            ToolBody::Api(e) => Some(e),
            ToolBody::Script(_) => None,
        }
    }
}

/// A retrieval hit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredTool {
    pub record: ToolRecord,
    pub similarity: f64,
}

#[derive(Debug, Error)]
pub enum RepositoryError {
    #[error("invalid tool record: {0}")]
    InvalidRecord(String),
    #[error("storage failure at {path}: {message}")]
    StorageFailure { path: PathBuf, message: String },
    #[error("no tool named `{0}`")]
    NotFound(String),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

/// Tool names double as directory names.
pub fn is_valid_tool_name(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= 128
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
        && !name.starts_with('-')
}

/// Turns an arbitrary label into a valid tool name (`Change Mode!` → `change_mode`).
pub fn sanitize_tool_name(raw: &str) -> String {
    let mut out = String::new();
    for c in raw.trim().chars() {
        if c.is_ascii_alphanumeric() || c == '_' {
            out.push(c.to_ascii_lowercase());
        } else if !out.ends_with('_') {
            out.push('_');
        }
    }
    let trimmed = out.trim_matches('_').to_string();
    if trimmed.is_empty() {
        "tool".to_string()
    } else {
        trimmed
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    name: String,
    description: String,
    kind: ToolKind,
    score: u8,
    version: u32,
    created_at: DateTime<Utc>,
    embedding: Vec<f32>,
    #[serde(default)]
    invocation_examples: Vec<String>,
}

pub struct ToolRepository {
    root: PathBuf,
    embedder: Arc<dyn Embedder>,
    index: RwLock<BTreeMap<String, ToolRecord>>,
    writer: Mutex<()>,
}

impl ToolRepository {
    /// Opens the repository at `root`, creating the directory layout if needed.
    pub fn open(root: impl Into<PathBuf>, embedder: Arc<dyn Embedder>) -> Result<Self, RepositoryError> {
        let root = root.into();
        let tools = root.join(TOOLS_DIR);
        fs::create_dir_all(&tools).map_err(|e| storage(&tools, e))?;
        let mut index = BTreeMap::new();
        for entry in fs::read_dir(&tools).map_err(|e| storage(&tools, e))? {
            let entry = entry.map_err(|e| storage(&tools, e))?;
            if !entry.path().is_dir() {
                continue;
            }
            let record = read_record(&entry.path())?;
            index.insert(record.name.clone(), record);
        }
        Ok(Self { root, embedder, index: RwLock::new(index), writer: Mutex::new(()) })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn embedder(&self) -> &dyn Embedder {
        self.embedder.as_ref()
    }

    pub fn len(&self) -> usize {
        self.index.read().expect("index lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All records sorted by name.
    pub fn list(&self) -> Vec<ToolRecord> {
        self.index.read().expect("index lock").values().cloned().collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.index.read().expect("index lock").keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<ToolRecord> {
        self.index.read().expect("index lock").get(name).cloned()
    }

    /// Top-`k` tools by cosine similarity to `query`, keeping only those at
    /// or above `threshold`. Ties go to the lexicographically smaller name.
    pub fn retrieve(&self, query: &str, k: usize, threshold: f64) -> Result<Vec<ScoredTool>, RepositoryError> {
        self.retrieve_kind(query, k, threshold, None)
    }

    pub fn retrieve_kind(
        &self,
        query: &str,
        k: usize,
        threshold: f64,
        kind: Option<ToolKind>,
    ) -> Result<Vec<ScoredTool>, RepositoryError> {
        let q = self.embedder.embed(query)?;
        let index = self.index.read().expect("index lock");
        Ok(rank(&q, index.values().filter(|r| kind.is_none_or(|k| r.kind() == k)), k, threshold))
    }

    /// Persists `record`. A new name starts at version 1; storing an
    /// existing name replaces its body and bumps the version. The stored
    /// record's version is returned.
    pub fn store(&self, record: ToolRecord) -> Result<u32, RepositoryError> {
        self.check(&record)?;
        let _w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let previous = self.get(&record.name);
        let mut record = record;
        record.version = previous.as_ref().map_or(1, |p| p.version + 1);
        if let Some(prev) = &previous {
            record.created_at = prev.created_at;
        }
        let dir = self.root.join(TOOLS_DIR).join(&record.name);
        write_record(&dir, &record)?;
        let version = record.version;
        self.index.write().expect("index lock").insert(record.name.clone(), record);
        Ok(version)
    }

    pub fn remove(&self, name: &str) -> Result<ToolRecord, RepositoryError> {
        let _w = self.writer.lock().unwrap_or_else(|p| p.into_inner());
        let record = self.get(name).ok_or_else(|| RepositoryError::NotFound(name.to_string()))?;
        let dir = self.root.join(TOOLS_DIR).join(name);
        fs::remove_dir_all(&dir).map_err(|e| storage(&dir, e))?;
        self.index.write().expect("index lock").remove(name);
        Ok(record)
    }

    fn check(&self, r: &ToolRecord) -> Result<(), RepositoryError> {
        let bad = |m: String| Err(RepositoryError::InvalidRecord(m));
        if !is_valid_tool_name(&r.name) {
            return bad(format!("name `{}` must be [A-Za-z0-9_-]+", r.name));
        }
        if r.description.trim().is_empty() {
            return bad("description is empty".into());
        }
        if r.score > 10 {
            return bad(format!("score {} outside 0..=10", r.score));
        }
        if r.embedding.len() != self.embedder.dimension() {
            return bad(format!("embedding has {} dims, repository uses {}", r.embedding.len(), self.embedder.dimension()));
        }
        let norm = l2_norm(&r.embedding);
        if (norm - 1.0).abs() > 1e-6 {
            return bad(format!("embedding norm {norm} is not 1"));
        }
        match &r.body {
            ToolBody::Script(s) if s.trim().is_empty() => bad("script source is empty".into()),
            ToolBody::Api(e) if !e.method.eq_ignore_ascii_case("POST") => bad("API tools must use POST".into()),
            _ => Ok(()),
        }
    }
}

/// Brute-force ranking shared by the repository and anything holding
/// records in memory.
pub fn rank<'a>(
    query: &[f32],
    records: impl Iterator<Item = &'a ToolRecord>,
    k: usize,
    threshold: f64,
) -> Vec<ScoredTool> {
    let mut hits: Vec<ScoredTool> = records
        .map(|r| ScoredTool { similarity: cosine(query, &r.embedding), record: r.clone() })
        .filter(|s| s.similarity >= threshold)
        .collect();
    // Similarities that differ only by rounding noise count as ties.
    hits.sort_by(|a, b| {
        rank_key(b.similarity).cmp(&rank_key(a.similarity)).then_with(|| a.record.name.cmp(&b.record.name))
    });
    hits.truncate(k);
    hits
}

/// Ordering key for a similarity, quantized to [`RANK_RESOLUTION`].
fn rank_key(similarity: f64) -> i64 {
    (similarity / RANK_RESOLUTION).round() as i64
}

fn storage(path: &Path, e: impl std::fmt::Display) -> RepositoryError {
    RepositoryError::StorageFailure { path: path.to_path_buf(), message: e.to_string() }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), RepositoryError> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| storage(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| storage(path, e))
}

fn write_record(dir: &Path, r: &ToolRecord) -> Result<(), RepositoryError> {
    fs::create_dir_all(dir).map_err(|e| storage(dir, e))?;
    match &r.body {
        ToolBody::Script(src) => {
            write_atomic(&dir.join(SOURCE_FILE), src.as_bytes())?;
            let _ = fs::remove_file(dir.join(ENDPOINT_FILE));
        }
        ToolBody::Api(endpoint) => {
            let json = serde_json::to_vec_pretty(endpoint).expect("endpoint serializes");
            write_atomic(&dir.join(ENDPOINT_FILE), &json)?;
            let _ = fs::remove_file(dir.join(SOURCE_FILE));
        }
    }
    let meta = Meta {
        name: r.name.clone(),
        description: r.description.clone(),
        kind: r.kind(),
        score: r.score,
        version: r.version,
        created_at: r.created_at,
        embedding: r.embedding.clone(),
        invocation_examples: r.invocation_examples.clone(),
    };
    // Metadata last: a tool directory without meta.json is ignored on load.
    write_atomic(&dir.join(META_FILE), &serde_json::to_vec_pretty(&meta).expect("meta serializes"))
}

fn read_record(dir: &Path) -> Result<ToolRecord, RepositoryError> {
    let meta_path = dir.join(META_FILE);
    let text = fs::read_to_string(&meta_path).map_err(|e| storage(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| storage(&meta_path, e))?;
    let body = match meta.kind {
        ToolKind::ScriptTool => {
            let p = dir.join(SOURCE_FILE);
            ToolBody::Script(fs::read_to_string(&p).map_err(|e| storage(&p, e))?)
        }
        ToolKind::ApiTool => {
            let p = dir.join(ENDPOINT_FILE);
            let text = fs::read_to_string(&p).map_err(|e| storage(&p, e))?;
            ToolBody::Api(serde_json::from_str(&text).map_err(|e| storage(&p, e))?)
        }
    };
    Ok(ToolRecord {
        name: meta.name,
        description: meta.description,
        body,
        score: meta.score,
        embedding: meta.embedding,
        version: meta.version,
        created_at: meta.created_at,
        invocation_examples: meta.invocation_examples,
    })
}

/// Short human-readable timestamp for listings.
pub fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Secs, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::memory::embed::HashEmbedder;

    fn repo() -> (tempfile::TempDir, ToolRepository) {
        let dir = tempfile::tempdir().unwrap();
        let repo = ToolRepository::open(dir.path(), Arc::new(HashEmbedder::default())).unwrap();
        (dir, repo)
    }

    fn tool(repo: &ToolRepository, name: &str, desc: &str) -> ToolRecord {
        ToolRecord::script(name, desc, format!("# {name}\n"), 9, repo.embedder()).unwrap()
    }

    #[test]
    fn new_tool_is_version_one_then_bumps() {
        let (_d, repo) = repo();
        assert_eq!(repo.store(tool(&repo, "create_folder", "Create a folder")).unwrap(), 1);
        let mut again = tool(&repo, "create_folder", "Create a folder");
        again.body = ToolBody::Script("# replaced\n".into());
        assert_eq!(repo.store(again).unwrap(), 2);
        assert_eq!(repo.get("create_folder").unwrap().source(), Some("# replaced\n"));
        assert_eq!(repo.len(), 1);
    }

    #[test]
    fn exact_description_match_comes_first() {
        let (_d, repo) = repo();
        repo.store(tool(&repo, "read_json_file", "Read the content of the specified JSON file")).unwrap();
        repo.store(tool(&repo, "create_folder", "Create a folder under the default working directory")).unwrap();
        let hits = repo.retrieve("Create a folder under the default working directory", 5, 0.75).unwrap();
        assert_eq!(hits[0].record.name, "create_folder");
        assert!((hits[0].similarity - 1.0).abs() < 1e-6);
    }

    #[test]
    fn nothing_above_threshold_means_empty() {
        let (_d, repo) = repo();
        repo.store(tool(&repo, "read_csv_file", "Read the content of a CSV file")).unwrap();
        assert!(repo.retrieve("Change the system into the Dark mode", 5, 0.75).unwrap().is_empty());
    }

    #[test]
    fn dark_mode_tool_is_retrievable_after_store() {
        let (_d, repo) = repo();
        repo.store(tool(&repo, "change_system_to_dark_mode", "Change the system appearance into dark mode")).unwrap();
        let hits = repo.retrieve("dark mode", 5, 0.3).unwrap();
        assert_eq!(hits.first().map(|h| h.record.name.as_str()), Some("change_system_to_dark_mode"));
    }

    #[test]
    fn reload_matches_memory() {
        let (dir, repo) = repo();
        repo.store(tool(&repo, "a", "alpha tool")).unwrap();
        let api = ToolRecord::api(
            "search",
            "search the web",
            ApiEndpoint::post("http://127.0.0.1:1/tools/search", "{query}"),
            10,
            repo.embedder(),
        )
        .unwrap();
        repo.store(api).unwrap();
        let reloaded = ToolRepository::open(dir.path(), Arc::new(HashEmbedder::default())).unwrap();
        assert_eq!(reloaded.list(), repo.list());
        assert!(dir.path().join("tools/search/endpoint.json").exists());
        assert!(dir.path().join("tools/a/tool.src").exists());
    }

    #[test]
    fn invalid_records_rejected() {
        let (_d, repo) = repo();
        let mut r = tool(&repo, "bad name", "x y");
        assert!(matches!(repo.store(r.clone()), Err(RepositoryError::InvalidRecord(_))));
        r.name = "ok".into();
        r.score = 11;
        assert!(matches!(repo.store(r.clone()), Err(RepositoryError::InvalidRecord(_))));
        r.score = 5;
        r.embedding[0] += 0.5;
        assert!(matches!(repo.store(r), Err(RepositoryError::InvalidRecord(_))));
    }

    #[test]
    fn sanitize_names() {
        assert_eq!(sanitize_tool_name("Change the system!"), "change_the_system");
        assert_eq!(sanitize_tool_name("  "), "tool");
        assert!(is_valid_tool_name(&sanitize_tool_name("a/b/../c")));
    }
}
