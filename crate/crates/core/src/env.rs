//! Filesystem state of a working directory, captured before and after each
//! execution so the critic can see what changed.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::UNIX_EPOCH;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Entries are listed up to this many path components below the root.
pub const SNAPSHOT_DEPTH: usize = 3;

/// Scratch directory the runtimes keep inside a sandbox; never listed.
pub const HARNESS_DIR: &str = ".harness";

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("working directory {0} does not exist")]
    PathMissing(PathBuf),
    #[error("snapshots of different roots: {0} vs {1}")]
    RootMismatch(PathBuf, PathBuf),
    #[error("reading {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EnvEntry {
    /// Relative path with `/` separators; directories end in `/`.
    pub path: String,
    pub size: u64,
    /// Whole seconds since the Unix epoch.
    pub mtime: i64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnvSnapshot {
    pub working_dir: PathBuf,
    pub entries: Vec<EnvEntry>,
    pub os_version: String,
}

impl EnvSnapshot {
    pub fn contains(&self, path: &str) -> bool {
        self.entries.iter().any(|e| e.path == path)
    }

    pub fn paths(&self) -> Vec<&str> {
        self.entries.iter().map(|e| e.path.as_str()).collect()
    }

    /// Prompt-friendly listing without timestamps, so it is stable across
    /// runs that produce the same files.
    pub fn listing(&self) -> String {
        if self.entries.is_empty() {
            return "(empty)".to_string();
        }
        self.entries
            .iter()
            .map(|e| if e.path.ends_with('/') { e.path.clone() } else { format!("{} ({} bytes)", e.path, e.size) })
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotDiff {
    pub added: Vec<String>,
    pub removed: Vec<String>,
    pub modified: Vec<String>,
}

impl SnapshotDiff {
    pub fn is_empty(&self) -> bool {
        self.added.is_empty() && self.removed.is_empty() && self.modified.is_empty()
    }

    pub fn summary(&self) -> String {
        if self.is_empty() {
            return "no changes".to_string();
        }
        let mut parts = Vec::new();
        for (label, items) in [("added", &self.added), ("removed", &self.removed), ("modified", &self.modified)] {
            if !items.is_empty() {
                parts.push(format!("{label}: {}", items.join(", ")));
            }
        }
        parts.join("; ")
    }
}

/// Sorted recursive listing of `working_dir` (depth ≤ 3) plus the OS
/// version string.
pub fn snapshot_environment(working_dir: &Path) -> Result<EnvSnapshot, EnvError> {
    if !working_dir.is_dir() {
        return Err(EnvError::PathMissing(working_dir.to_path_buf()));
    }
    let root = working_dir
        .canonicalize()
        .map_err(|source| EnvError::Io { path: working_dir.to_path_buf(), source })?;
    let mut entries = Vec::new();
    walk(&root, "", 1, &mut entries)?;
    entries.sort();
    Ok(EnvSnapshot { working_dir: root, entries, os_version: os_version() })
}

fn walk(dir: &Path, prefix: &str, depth: usize, out: &mut Vec<EnvEntry>) -> Result<(), EnvError> {
    let io_err = |source| EnvError::Io { path: dir.to_path_buf(), source };
    for item in fs::read_dir(dir).map_err(io_err)? {
        let item = item.map_err(io_err)?;
        let name = item.file_name().to_string_lossy().into_owned();
        if depth == 1 && name == HARNESS_DIR {
            continue;
        }
        let meta = match item.path().symlink_metadata() {
            Ok(m) => m,
            // Vanished between read_dir and stat.
            Err(_) => continue,
        };
        let mtime = meta
            .modified()
            .ok()
            .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
            .map_or(0, |d| d.as_secs() as i64);
        let rel = format!("{prefix}{name}");
        if meta.is_dir() {
            out.push(EnvEntry { path: format!("{rel}/"), size: 0, mtime });
            if depth < SNAPSHOT_DEPTH {
                walk(&item.path(), &format!("{rel}/"), depth + 1, out)?;
            }
        } else {
            out.push(EnvEntry { path: rel, size: meta.len(), mtime });
        }
    }
    Ok(())
}

/// Path-level set differences; `modified` means same path with a different
/// size or mtime.
pub fn diff_snapshots(before: &EnvSnapshot, after: &EnvSnapshot) -> Result<SnapshotDiff, EnvError> {
    if before.working_dir != after.working_dir {
        return Err(EnvError::RootMismatch(before.working_dir.clone(), after.working_dir.clone()));
    }
    let old: BTreeMap<&str, &EnvEntry> = before.entries.iter().map(|e| (e.path.as_str(), e)).collect();
    let new: BTreeMap<&str, &EnvEntry> = after.entries.iter().map(|e| (e.path.as_str(), e)).collect();
    let mut diff = SnapshotDiff::default();
    for (path, entry) in &new {
        match old.get(path) {
            None => diff.added.push(path.to_string()),
            Some(prev) if prev.size != entry.size || prev.mtime != entry.mtime => {
                diff.modified.push(path.to_string())
            }
            Some(_) => {}
        }
    }
    diff.removed = old.keys().filter(|p| !new.contains_key(*p)).map(|p| p.to_string()).collect();
    Ok(diff)
}

/// Best-effort description of the host OS, e.g. `linux Ubuntu 22.04.4 LTS`.
pub fn os_version() -> String {
    let pretty = fs::read_to_string("/etc/os-release").ok().and_then(|text| {
        text.lines()
            .find_map(|l| l.strip_prefix("PRETTY_NAME="))
            .map(|v| v.trim_matches('"').to_string())
    });
    match pretty {
        Some(p) => format!("{} {p}", std::env::consts::OS),
        None => std::env::consts::OS.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs::File;
    use std::time::{Duration, SystemTime};

    #[test]
    fn empty_dir_lists_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let snap = snapshot_environment(dir.path()).unwrap();
        assert!(snap.entries.is_empty());
        assert_eq!(snap.listing(), "(empty)");
    }

    #[test]
    fn missing_dir_is_an_error() {
        assert!(matches!(snapshot_environment(Path::new("/definitely/not/here")), Err(EnvError::PathMissing(_))));
    }

    #[test]
    fn new_folder_shows_up_as_added() {
        let dir = tempfile::tempdir().unwrap();
        let before = snapshot_environment(dir.path()).unwrap();
        fs::create_dir(dir.path().join("new_folder")).unwrap();
        let after = snapshot_environment(dir.path()).unwrap();
        assert!(after.contains("new_folder/"));
        let diff = diff_snapshots(&before, &after).unwrap();
        assert_eq!(diff.added, ["new_folder/"]);
        assert!(diff.removed.is_empty() && diff.modified.is_empty());
    }

    #[test]
    fn unchanged_dir_has_empty_diff() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.txt"), "x").unwrap();
        let a = snapshot_environment(dir.path()).unwrap();
        let b = snapshot_environment(dir.path()).unwrap();
        assert!(diff_snapshots(&a, &b).unwrap().is_empty());
    }

    #[test]
    fn same_size_rewrite_with_newer_mtime_is_modified() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("data.txt");
        let t0 = SystemTime::UNIX_EPOCH + Duration::from_secs(1_700_000_000);
        fs::write(&path, "aaaa").unwrap();
        File::options().write(true).open(&path).unwrap().set_modified(t0).unwrap();
        let before = snapshot_environment(dir.path()).unwrap();

        fs::write(&path, "bbbb").unwrap();
        File::options().write(true).open(&path).unwrap().set_modified(t0 + Duration::from_secs(5)).unwrap();
        let after = snapshot_environment(dir.path()).unwrap();

        let diff = diff_snapshots(&before, &after).unwrap();
        assert_eq!(diff.modified, ["data.txt"]);
        assert!(diff.added.is_empty());
    }

    #[test]
    fn depth_is_capped_and_harness_dir_hidden() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("a/b/c/d")).unwrap();
        fs::create_dir_all(dir.path().join(HARNESS_DIR)).unwrap();
        let snap = snapshot_environment(dir.path()).unwrap();
        assert_eq!(snap.paths(), ["a/", "a/b/", "a/b/c/"]);
    }

    #[test]
    fn root_mismatch() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = snapshot_environment(a.path()).unwrap();
        let sb = snapshot_environment(b.path()).unwrap();
        assert!(matches!(diff_snapshots(&sa, &sb), Err(EnvError::RootMismatch(..))));
    }
}
