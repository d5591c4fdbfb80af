//! `taskpilot`: run requests, grow the tool repository through a
//! curriculum, inspect memory and check recorded runs.

mod config;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::Value;
use taskpilot_core::actor::tool_description;
use taskpilot_core::agent::{sandbox_keyer, Observer};
use taskpilot_core::learning::{propose_curriculum, run_curriculum, LearningError, LearningObjective, TaskOutcome};
use taskpilot_core::llm::{ChatBackend, LiveBackend, LiveConfig, RecordingBackend, ReplayBackend, TranscriptError};
use taskpilot_core::manifest::{replay_manifest, ManifestError, RunManifest};
use taskpilot_core::memory::{
    format_timestamp, seed_api_tools, seed_script_tools, ConfiguratorSettings, EmbedError, HashEmbedder,
    KnowledgeEntry, KnowledgeError, KnowledgeSource, KnowledgeStore, Memory, RepositoryError, ToolKind, ToolRecord,
    ToolRepository, UserProfile,
};
use taskpilot_core::runtime::LocalRuntime;
use taskpilot_core::template::{TemplateError, TemplateSet};
use taskpilot_core::{Agent, AgentConfig, AgentError, AgentEvent, RunReport};
use thiserror::Error;
use tracing::{info, warn};

use config::{BackendMode, Overrides, Settings};

const KNOWLEDGE_FILE: &str = "knowledge.jsonl";
const PROFILE_FILE: &str = "profile.json";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Failed(String),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Repository(#[from] RepositoryError),
    #[error(transparent)]
    Knowledge(#[from] KnowledgeError),
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error(transparent)]
    Template(#[from] TemplateError),
    #[error(transparent)]
    Transcript(#[from] TranscriptError),
    #[error(transparent)]
    Learning(#[from] LearningError),
    #[error(transparent)]
    Embed(#[from] EmbedError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Parser)]
#[command(name = "taskpilot", version, about = "Plan, execute and learn computer tasks with a language model")]
struct Cli {
    /// JSON config file (also `TASKPILOT_CONFIG`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Memory directory holding tools, knowledge and the user profile.
    #[arg(long, global = true)]
    repo: Option<PathBuf>,
    /// More log output on stderr; repeat for debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ExecArgs {
    /// Working directory the tools act on. A fresh one is created if absent.
    #[arg(long)]
    sandbox: Option<PathBuf>,
    #[arg(long, value_enum)]
    backend: Option<BackendMode>,
    /// Transcript to replay from or record into.
    #[arg(long)]
    transcript: Option<PathBuf>,
    /// Subtasks of one wave run concurrently up to this many.
    #[arg(long)]
    parallel: Option<usize>,
    /// Execute/critique rounds per subtask.
    #[arg(long)]
    max_attempts: Option<u32>,
    /// Minimum similarity for tool retrieval.
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Plan and execute one request, printing the run report as JSON.
    Run {
        request: String,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Propose a curriculum for an objective and run it to grow the tool repository.
    Learn {
        objective: String,
        #[arg(long, default_value_t = 10)]
        tasks: usize,
        /// Extra context for the curriculum, repeatable.
        #[arg(long = "hint")]
        hints: Vec<String>,
        #[command(flatten)]
        exec: ExecArgs,
    },
    /// Inspect or edit the tool repository.
    #[command(subcommand)]
    Tools(ToolsCommand),
    /// Inspect or edit the knowledge store.
    #[command(subcommand)]
    Knowledge(KnowledgeCommand),
    /// Inspect or edit the user profile.
    #[command(subcommand)]
    Profile(ProfileCommand),
    /// Re-run a recorded transcript against its manifest and compare reports.
    Replay {
        transcript: PathBuf,
        /// Keep the scratch directory the run is rebuilt in.
        #[arg(long)]
        keep: bool,
    },
}

#[derive(Debug, Subcommand)]
enum ToolsCommand {
    List,
    Show {
        name: String,
    },
    /// Delete a tool.
    Rm {
        name: String,
    },
    /// Store a Python tool from a file.
    Add {
        file: PathBuf,
        /// Defaults to the class name in the file.
        #[arg(long)]
        name: Option<String>,
        /// Defaults to the `_description` assigned in the file.
        #[arg(long)]
        description: Option<String>,
        #[arg(long, default_value_t = 10)]
        score: u8,
    },
    /// Store the bundled file tools and the tool-service endpoints.
    Seed {
        /// Base URL of the tool service; overrides the configured one.
        #[arg(long)]
        api_base: Option<String>,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum SourceArg {
    Os,
    User,
    Internet,
    Trajectory,
}

impl From<SourceArg> for KnowledgeSource {
    fn from(s: SourceArg) -> Self {
        match s {
            SourceArg::Os => KnowledgeSource::Os,
            SourceArg::User => KnowledgeSource::User,
            SourceArg::Internet => KnowledgeSource::Internet,
            SourceArg::Trajectory => KnowledgeSource::Trajectory,
        }
    }
}

#[derive(Debug, Subcommand)]
enum KnowledgeCommand {
    Add {
        key: String,
        value: String,
        #[arg(long, value_enum, default_value_t = SourceArg::User)]
        source: SourceArg,
    },
    /// Latest value per key.
    List,
}

#[derive(Debug, Subcommand)]
enum ProfileCommand {
    Set { key: String, value: String },
    Unset { key: String },
    Show,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => tracing::Level::WARN,
        1 => tracing::Level::INFO,
        _ => tracing::Level::DEBUG,
    };
    tracing_subscriber::fmt().with_writer(std::io::stderr).with_max_level(level).with_target(false).init();

    match dispatch(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("taskpilot: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(cli: Cli) -> Result<ExitCode, CliError> {
    let base = Overrides { repo: cli.repo.clone(), ..Overrides::default() };
    let settings = |exec: Option<&ExecArgs>| {
        let mut flags = base.clone();
        if let Some(e) = exec {
            flags.sandbox.clone_from(&e.sandbox);
            flags.backend = e.backend;
            flags.transcript.clone_from(&e.transcript);
            flags.parallel = e.parallel;
            flags.max_attempts = e.max_attempts;
            flags.threshold = e.threshold;
        }
        Settings::resolve(cli.config.as_deref(), &flags)
    };
    match &cli.command {
        Command::Run { request, exec } => cmd_run(&settings(Some(exec))?, request),
        Command::Learn { objective, tasks, hints, exec } => {
            let objective =
                LearningObjective { description: objective.clone(), task_count: *tasks, context_hints: hints.clone() };
            cmd_learn(&settings(Some(exec))?, &objective)
        }
        Command::Tools(c) => cmd_tools(&settings(None)?, c),
        Command::Knowledge(c) => cmd_knowledge(&settings(None)?, c),
        Command::Profile(c) => cmd_profile(&settings(None)?, c),
        Command::Replay { transcript, keep } => cmd_replay(&settings(None)?, transcript, *keep),
    }
}

fn open_repo(settings: &Settings) -> Result<ToolRepository, CliError> {
    fs::create_dir_all(&settings.repo).map_err(io_err(&settings.repo))?;
    Ok(ToolRepository::open(&settings.repo, Arc::new(HashEmbedder::default()))?)
}

fn open_memory(settings: &Settings) -> Result<Memory, CliError> {
    let repo = open_repo(settings)?;
    let knowledge = KnowledgeStore::open(settings.repo.join(KNOWLEDGE_FILE))?;
    let profile = UserProfile::load(&settings.repo.join(PROFILE_FILE))?;
    let configured = ConfiguratorSettings { top_k: settings.top_k, threshold: settings.threshold, ..Default::default() };
    Ok(Memory::new(Arc::new(repo), Arc::new(knowledge), profile).with_settings(configured))
}

fn templates(settings: &Settings) -> Result<Arc<TemplateSet>, CliError> {
    Ok(Arc::new(match &settings.templates {
        Some(dir) => TemplateSet::load_dir(dir)?,
        None => TemplateSet::default(),
    }))
}

fn sandbox_dir(settings: &Settings) -> Result<PathBuf, CliError> {
    match &settings.sandbox {
        Some(p) => {
            fs::create_dir_all(p).map_err(io_err(p))?;
            Ok(p.clone())
        }
        None => {
            let dir = tempfile::Builder::new().prefix("taskpilot-sandbox-").tempdir().map_err(io_err(Path::new("tmp")))?;
            let path = dir.keep();
            eprintln!("taskpilot: sandbox {}", path.display());
            Ok(path)
        }
    }
}

fn transcript_path(settings: &Settings) -> Result<&Path, CliError> {
    settings
        .transcript
        .as_deref()
        .ok_or_else(|| CliError::Usage("this backend needs --transcript (or TASKPILOT_TRANSCRIPT)".into()))
}

fn backend(settings: &Settings, sandbox: &Path) -> Result<Arc<dyn ChatBackend>, CliError> {
    Ok(match settings.backend {
        BackendMode::Live => Arc::new(LiveBackend::new(LiveConfig::from_env())),
        BackendMode::Replay => Arc::new(ReplayBackend::from_file(transcript_path(settings)?, sandbox_keyer(sandbox))?),
        BackendMode::Record => Arc::new(RecordingBackend::new(
            LiveBackend::new(LiveConfig::from_env()),
            transcript_path(settings)?,
            sandbox_keyer(sandbox),
        )?),
    })
}

fn log_events() -> Observer {
    Arc::new(|event: &AgentEvent| match event {
        AgentEvent::Planned { subtasks } => info!("planned {}", subtasks.join(", ")),
        AgentEvent::WaveStarted { index, subtasks } => info!("wave {index}: {}", subtasks.join(", ")),
        AgentEvent::SubtaskStarted { name } => info!("start {name}"),
        AgentEvent::SubtaskFinished { name, status } => info!("finish {name}: {status:?}"),
        AgentEvent::Replanned { failed, reason } => warn!("replanned after {failed}: {reason}"),
        AgentEvent::FinalAnswerRequested { .. } => info!("composing the final answer"),
    })
}

fn print_report(report: &RunReport) -> ExitCode {
    println!("{}", report.to_json());
    if report.success {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    }
}

fn cmd_run(settings: &Settings, request: &str) -> Result<ExitCode, CliError> {
    if settings.backend == BackendMode::Replay && settings.sandbox.is_none() {
        let transcript = transcript_path(settings)?;
        let sidecar = RunManifest::sidecar_path(transcript);
        if sidecar.exists() {
            return run_from_manifest(settings, request, transcript, &sidecar);
        }
    }

    let sandbox = sandbox_dir(settings)?;
    let memory = open_memory(settings)?;
    let config = AgentConfig {
        parallel: settings.parallel,
        max_attempts: settings.max_attempts,
        ..AgentConfig::new(&sandbox)
    };
    let mut manifest = match settings.backend {
        BackendMode::Record => Some(RunManifest::capture(request, &memory, &config)?),
        _ => None,
    };
    let agent = Agent::new(backend(settings, &sandbox)?, Arc::new(LocalRuntime::new()), Arc::new(memory), templates(settings)?, config)
        .with_observer(log_events());
    let report = match agent.run_task(request) {
        Ok(r) => r,
        Err(AgentError::TaskFailed(r)) => *r,
        Err(e) => return Err(e.into()),
    };
    if let Some(m) = manifest.as_mut() {
        m.report = Some(report.clone());
        let path = RunManifest::sidecar_path(transcript_path(settings)?);
        m.save(&path)?;
        info!("manifest written to {}", path.display());
    }
    Ok(print_report(&report))
}

/// Replays inside a scratch copy of the recorded inputs so that tool and
/// sandbox state match what the transcript was keyed against.
fn run_from_manifest(settings: &Settings, request: &str, transcript: &Path, sidecar: &Path) -> Result<ExitCode, CliError> {
    let manifest = RunManifest::load(sidecar)?;
    if manifest.request != request {
        return Err(CliError::Usage(format!(
            "{} records the request {:?}; replay needs the same request or an explicit --sandbox",
            sidecar.display(),
            manifest.request
        )));
    }
    let work = tempfile::tempdir().map_err(io_err(Path::new("tmp")))?;
    let outcome = replay_manifest(&manifest, transcript, templates(settings)?, Arc::new(LocalRuntime::new()), work.path())?;
    match (&outcome.actual, outcome.error) {
        (Some(report), _) => Ok(print_report(report)),
        (None, Some(e)) => Err(CliError::Failed(e)),
        (None, None) => Err(CliError::Failed("replay produced no report".into())),
    }
}

fn cmd_learn(settings: &Settings, objective: &LearningObjective) -> Result<ExitCode, CliError> {
    if objective.task_count == 0 {
        return Err(CliError::Usage("--tasks must be at least 1".into()));
    }
    let sandbox = sandbox_dir(settings)?;
    let memory = open_memory(settings)?;
    let templates = templates(settings)?;
    let backend = backend(settings, &sandbox)?;
    let tasks = propose_curriculum(&templates, objective, &*backend)?;
    let config = AgentConfig {
        parallel: settings.parallel,
        max_attempts: settings.max_attempts,
        ..AgentConfig::new(&sandbox)
    };
    let agent = Agent::new(backend, Arc::new(LocalRuntime::new()), Arc::new(memory), templates, config)
        .with_observer(log_events());
    let report = run_curriculum(&objective.description, &tasks, &agent);
    println!("{}", report.to_json());
    let all_done = report.tasks.iter().all(|t| t.outcome == TaskOutcome::Completed);
    Ok(if all_done { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

/// Name of the first `class Name(` in a tool file.
fn class_name(source: &str) -> Option<String> {
    source.lines().find_map(|line| {
        let rest = line.strip_prefix("class ")?;
        let end = rest.find(['(', ':'])?;
        Some(rest[..end].trim().to_string()).filter(|n| !n.is_empty())
    })
}

fn kind_label(kind: ToolKind) -> &'static str {
    match kind {
        ToolKind::ScriptTool => "script",
        ToolKind::ApiTool => "api",
    }
}

fn cmd_tools(settings: &Settings, command: &ToolsCommand) -> Result<ExitCode, CliError> {
    let repo = open_repo(settings)?;
    let mut out = std::io::stdout().lock();
    match command {
        ToolsCommand::List => {
            let tools = repo.list();
            let width = tools.iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
            let _ = writeln!(out, "{:width$}  {:6}  {:5}  {:7}  {:20}  DESCRIPTION", "NAME", "KIND", "SCORE", "VERSION", "CREATED");
            for t in tools {
                let _ = writeln!(
                    out,
                    "{:width$}  {:6}  {:5}  {:7}  {:20}  {}",
                    t.name,
                    kind_label(t.kind()),
                    t.score,
                    t.version,
                    format_timestamp(&t.created_at),
                    t.description
                );
            }
        }
        ToolsCommand::Show { name } => {
            let record = repo.get(name).ok_or_else(|| CliError::Failed(format!("no tool named {name}")))?;
            let mut value = serde_json::to_value(&record).expect("tool records serialize");
            if let Value::Object(map) = &mut value {
                map.remove("embedding");
            }
            let _ = writeln!(out, "{}", serde_json::to_string_pretty(&value).expect("values serialize"));
        }
        ToolsCommand::Rm { name } => {
            repo.remove(name)?;
            let _ = writeln!(out, "removed {name}");
        }
        ToolsCommand::Add { file, name, description, score } => {
            let source = fs::read_to_string(file).map_err(io_err(file))?;
            let name = name
                .clone()
                .or_else(|| class_name(&source))
                .ok_or_else(|| CliError::Usage(format!("{}: no class found, pass --name", file.display())))?;
            let description = description
                .clone()
                .or_else(|| tool_description(&source))
                .ok_or_else(|| CliError::Usage(format!("{}: no _description found, pass --description", file.display())))?;
            if *score > 10 {
                return Err(CliError::Usage(format!("score {score} outside 0..=10")));
            }
            let version = repo.store(ToolRecord::script(&name, description, source, *score, repo.embedder())?)?;
            let _ = writeln!(out, "stored {name} v{version}");
        }
        ToolsCommand::Seed { api_base } => {
            let mut added = seed_script_tools(&repo)?;
            added.extend(seed_api_tools(&repo, api_base.as_deref().unwrap_or(&settings.tool_service_url))?);
            for name in &added {
                let _ = writeln!(out, "seeded {name}");
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_knowledge(settings: &Settings, command: &KnowledgeCommand) -> Result<ExitCode, CliError> {
    fs::create_dir_all(&settings.repo).map_err(io_err(&settings.repo))?;
    let store = KnowledgeStore::open(settings.repo.join(KNOWLEDGE_FILE))?;
    match command {
        KnowledgeCommand::Add { key, value, source } => {
            store.insert(KnowledgeEntry::new(key, value, (*source).into()))?;
        }
        KnowledgeCommand::List => {
            let mut keys: Vec<String> = store.entries().into_iter().map(|e| e.key).collect();
            keys.sort();
            keys.dedup();
            for key in keys {
                if let Some(e) = store.latest(&key) {
                    println!("{}\t{}\t{:?}\t{}", e.key, e.value, e.source, format_timestamp(&e.timestamp));
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_profile(settings: &Settings, command: &ProfileCommand) -> Result<ExitCode, CliError> {
    fs::create_dir_all(&settings.repo).map_err(io_err(&settings.repo))?;
    let path = settings.repo.join(PROFILE_FILE);
    let mut profile = UserProfile::load(&path)?;
    match command {
        ProfileCommand::Set { key, value } => {
            profile.preferences.insert(key.clone(), value.clone());
            profile.save(&path)?;
        }
        ProfileCommand::Unset { key } => {
            profile.preferences.remove(key);
            profile.save(&path)?;
        }
        ProfileCommand::Show => println!("{}", profile.snippet()),
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(settings: &Settings, transcript: &Path, keep: bool) -> Result<ExitCode, CliError> {
    let sidecar = RunManifest::sidecar_path(transcript);
    if !sidecar.exists() {
        return Err(CliError::Usage(format!("{} not found; only recorded runs can be replayed", sidecar.display())));
    }
    let manifest = RunManifest::load(&sidecar)?;
    let work = tempfile::Builder::new().prefix("taskpilot-replay-").tempdir().map_err(io_err(Path::new("tmp")))?;
    let outcome = replay_manifest(&manifest, transcript, templates(settings)?, Arc::new(LocalRuntime::new()), work.path())?;
    if keep {
        eprintln!("taskpilot: replay workdir {}", work.keep().display());
    }
    if let Some(e) = &outcome.error {
        println!("replay error: {e}");
    }
    if outcome.matches() {
        println!("reports match");
        return Ok(ExitCode::SUCCESS);
    }
    if manifest.report.is_none() {
        println!("the manifest holds no recorded report");
    }
    for line in outcome.diff() {
        println!("{line}");
    }
    Ok(ExitCode::from(1))
}
