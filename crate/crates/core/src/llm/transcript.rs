//! JSON-lines transcripts: `{key, request, response}` per line.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{BackendError, ChatBackend, ChatRequest, RequestKeyer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub request: ChatRequest,
    pub response: String,
}

#[derive(Debug, Error)]
pub enum TranscriptError {
    #[error("transcript {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("transcript {path} line {line}: {message}")]
    Malformed { path: String, line: usize, message: String },
    #[error("transcript {path} has duplicate key {key}")]
    DuplicateKey { path: String, key: String },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Transcript {
    entries: Vec<TranscriptEntry>,
    index: HashMap<String, usize>,
}

impl Transcript {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn load(path: &Path) -> Result<Self, TranscriptError> {
        let io_err = |source| TranscriptError::Io { path: path.display().to_string(), source };
        let reader = BufReader::new(File::open(path).map_err(io_err)?);
        let mut transcript = Self::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io_err)?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: TranscriptEntry = serde_json::from_str(&line).map_err(|e| TranscriptError::Malformed {
                path: path.display().to_string(),
                line: i + 1,
                message: e.to_string(),
            })?;
            if !transcript.push(entry.clone()) {
                return Err(TranscriptError::DuplicateKey { path: path.display().to_string(), key: entry.key });
            }
        }
        Ok(transcript)
    }

    /// Adds an entry unless its key is already present. Returns whether it
    /// was added.
    pub fn push(&mut self, entry: TranscriptEntry) -> bool {
        if self.index.contains_key(&entry.key) {
            return false;
        }
        self.index.insert(entry.key.clone(), self.entries.len());
        self.entries.push(entry);
        true
    }

    pub fn get(&self, key: &str) -> Option<&TranscriptEntry> {
        self.index.get(key).map(|&i| &self.entries[i])
    }

    pub fn entries(&self) -> &[TranscriptEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), TranscriptError> {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("transcript entries serialize"));
            out.push('\n');
        }
        fs::write(path, out).map_err(|source| TranscriptError::Io { path: path.display().to_string(), source })
    }
}

/// Answers from a fixed transcript by exact key lookup.
pub struct ReplayBackend {
    transcript: Transcript,
    keyer: RequestKeyer,
}

impl ReplayBackend {
    pub fn new(transcript: Transcript, keyer: RequestKeyer) -> Self {
        Self { transcript, keyer }
    }

    pub fn from_file(path: &Path, keyer: RequestKeyer) -> Result<Self, TranscriptError> {
        Ok(Self::new(Transcript::load(path)?, keyer))
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }
}

impl ChatBackend for ReplayBackend {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let key = self.keyer.key(request);
        match self.transcript.get(&key) {
            Some(entry) => Ok(self.keyer.restore(&entry.response)),
            None => {
                tracing::debug!(%key, purpose = %request.purpose, "replay miss");
                Err(BackendError::ReplayMiss { key, purpose: request.purpose })
            }
        }
    }
}

/// Forwards to `inner` and appends each new exchange to a transcript file.
/// Requests already recorded are answered from the transcript.
pub struct RecordingBackend<B> {
    inner: B,
    keyer: RequestKeyer,
    path: PathBuf,
    state: Mutex<Transcript>,
}

impl<B: ChatBackend> RecordingBackend<B> {
    /// Opens (or creates) the transcript at `path`, keeping existing entries.
    pub fn new(inner: B, path: impl Into<PathBuf>, keyer: RequestKeyer) -> Result<Self, TranscriptError> {
        let path = path.into();
        let transcript = if path.exists() { Transcript::load(&path)? } else { Transcript::new() };
        Ok(Self { inner, keyer, path, state: Mutex::new(transcript) })
    }

    pub fn snapshot(&self) -> Transcript {
        self.state.lock().expect("transcript lock").clone()
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }
}

impl<B: ChatBackend> ChatBackend for RecordingBackend<B> {
    fn complete(&self, request: &ChatRequest) -> Result<String, BackendError> {
        let key = self.keyer.key(request);
        if let Some(entry) = self.state.lock().expect("transcript lock").get(&key) {
            return Ok(self.keyer.restore(&entry.response));
        }
        let response = self.inner.complete(request)?;
        let entry = TranscriptEntry {
            key: key.clone(),
            request: self.keyer.redacted_request(request),
            response: self.keyer.apply(&response),
        };
        let mut state = self.state.lock().expect("transcript lock");
        if state.push(entry.clone()) {
            let io_err = |source| TranscriptError::Io { path: self.path.display().to_string(), source };
            let mut file = OpenOptions::new().create(true).append(true).open(&self.path).map_err(io_err)?;
            let line = serde_json::to_string(&entry).expect("transcript entries serialize");
            writeln!(file, "{line}").map_err(io_err)?;
        }
        Ok(response)
    }
}
