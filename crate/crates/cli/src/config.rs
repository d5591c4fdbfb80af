//! Settings resolution: command-line flags over `TASKPILOT_*` environment
//! variables over the JSON config file over built-in defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::ValueEnum;
use serde::Deserialize;

use crate::CliError;

pub const ENV_CONFIG: &str = "TASKPILOT_CONFIG";
pub const DEFAULT_REPO: &str = ".taskpilot";
pub const DEFAULT_TOOL_SERVICE_URL: &str = "http://localhost:8079";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendMode {
    /// Query the configured model API.
    Live,
    /// Answer from a recorded transcript; a miss is an error.
    Replay,
    /// Query the model API and append every exchange to the transcript.
    Record,
}

impl FromStr for BackendMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| format!("unknown backend `{s}` (live, replay, record)"))
    }
}

/// Contents of the JSON config file. Every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub repo: Option<PathBuf>,
    pub sandbox: Option<PathBuf>,
    pub backend: Option<String>,
    pub transcript: Option<PathBuf>,
    pub parallel: Option<usize>,
    pub max_attempts: Option<u32>,
    pub threshold: Option<f64>,
    pub top_k: Option<usize>,
    pub tool_service_url: Option<String>,
    pub templates: Option<PathBuf>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
    }
}

/// Values given on the command line.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub repo: Option<PathBuf>,
    pub sandbox: Option<PathBuf>,
    pub backend: Option<BackendMode>,
    pub transcript: Option<PathBuf>,
    pub parallel: Option<usize>,
    pub max_attempts: Option<u32>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Settings {
    pub repo: PathBuf,
    pub sandbox: Option<PathBuf>,
    pub backend: BackendMode,
    pub transcript: Option<PathBuf>,
    pub parallel: usize,
    pub max_attempts: u32,
    pub threshold: f64,
    pub top_k: usize,
    pub tool_service_url: String,
    pub templates: Option<PathBuf>,
}

fn env_value<T: FromStr>(lookup: &dyn Fn(&str) -> Option<String>, name: &str) -> Result<Option<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    match lookup(name).filter(|v| !v.is_empty()) {
        None => Ok(None),
        Some(v) => v.parse().map(Some).map_err(|e| CliError::Usage(format!("{name}={v}: {e}"))),
    }
}

impl Settings {
    /// Resolves settings from the process environment.
    pub fn resolve(config: Option<&Path>, flags: &Overrides) -> Result<Self, CliError> {
        Self::resolve_with(config, flags, &|k| std::env::var(k).ok())
    }

    pub fn resolve_with(
        config: Option<&Path>,
        flags: &Overrides,
        lookup: &dyn Fn(&str) -> Option<String>,
    ) -> Result<Self, CliError> {
        let config_path = config.map(Path::to_path_buf).or_else(|| lookup(ENV_CONFIG).filter(|v| !v.is_empty()).map(PathBuf::from));
        let file = match config_path {
            Some(p) => FileConfig::load(&p)?,
            None => FileConfig::default(),
        };
        let file_backend = file.backend.as_deref().map(<BackendMode as FromStr>::from_str).transpose().map_err(CliError::Usage)?;

        let settings = Self {
            repo: flags
                .repo
                .clone()
                .or(env_value(lookup, "TASKPILOT_REPO")?)
                .or(file.repo)
                .unwrap_or_else(|| PathBuf::from(DEFAULT_REPO)),
            sandbox: flags.sandbox.clone().or(env_value(lookup, "TASKPILOT_SANDBOX")?).or(file.sandbox),
            backend: flags
                .backend
                .or(env_value::<BackendMode>(lookup, "TASKPILOT_BACKEND")?)
                .or(file_backend)
                .unwrap_or(BackendMode::Live),
            transcript: flags.transcript.clone().or(env_value(lookup, "TASKPILOT_TRANSCRIPT")?).or(file.transcript),
            parallel: flags.parallel.or(env_value(lookup, "TASKPILOT_PARALLEL")?).or(file.parallel).unwrap_or(1),
            max_attempts: flags
                .max_attempts
                .or(env_value(lookup, "TASKPILOT_MAX_ATTEMPTS")?)
                .or(file.max_attempts)
                .unwrap_or(taskpilot_core::actor::DEFAULT_MAX_ATTEMPTS),
            threshold: flags
                .threshold
                .or(env_value(lookup, "TASKPILOT_THRESHOLD")?)
                .or(file.threshold)
                .unwrap_or(taskpilot_core::memory::DEFAULT_THRESHOLD),
            top_k: env_value(lookup, "TASKPILOT_TOP_K")?.or(file.top_k).unwrap_or(taskpilot_core::memory::DEFAULT_TOP_K),
            tool_service_url: env_value(lookup, "TASKPILOT_TOOL_SERVICE_URL")?
                .or(file.tool_service_url)
                .unwrap_or_else(|| DEFAULT_TOOL_SERVICE_URL.to_string()),
            templates: env_value(lookup, "TASKPILOT_TEMPLATES")?.or(file.templates),
        };
        settings.check()?;
        Ok(settings)
    }

    fn check(&self) -> Result<(), CliError> {
        if self.parallel == 0 {
            return Err(CliError::Usage("parallel must be at least 1".into()));
        }
        if self.max_attempts == 0 {
            return Err(CliError::Usage("max-attempts must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(CliError::Usage(format!("threshold {} outside 0..=1", self.threshold)));
        }
        if self.top_k == 0 {
            return Err(CliError::Usage("top_k must be at least 1".into()));
        }
        Ok(())
    }
}
