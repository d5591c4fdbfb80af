//! Shared helpers for integration tests: counting runtime, HTTP stub
//! server, scripted model transcripts for the fixture flows.
#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde_json::{json, Value};
use taskpilot_core::llm::{Purpose, ScriptedBackend};
use taskpilot_core::memory::{
    ConfiguratorSettings, HashEmbedder, KnowledgeStore, Memory, ToolRepository, UserProfile,
};
use taskpilot_core::runtime::{ApiEndpoint, ExecutionResult, LocalRuntime, Runtime, RuntimeError};

pub fn fixtures_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Settings used by every recorded fixture, so prompts do not depend on
/// the host.
pub fn fixture_settings() -> ConfiguratorSettings {
    ConfiguratorSettings {
        system_version: Some("Fixture OS 1.0".into()),
        system_language: Some("English".into()),
        ..ConfiguratorSettings::default()
    }
}

pub fn memory_at(root: &Path) -> Memory {
    let repo = ToolRepository::open(root, Arc::new(HashEmbedder::default())).unwrap();
    Memory::new(Arc::new(repo), Arc::new(KnowledgeStore::in_memory()), UserProfile::default())
        .with_settings(fixture_settings())
}

/// Runtime wrapper that counts calls per kind and can stand in for real
/// execution with a fixed delay.
pub struct CountingRuntime {
    inner: Arc<dyn Runtime>,
    pub shell: AtomicUsize,
    pub script: AtomicUsize,
    pub api: AtomicUsize,
    /// When set, script calls sleep this long and succeed without running.
    pub simulate: Option<Duration>,
    pub starts: Mutex<Vec<(Instant, String)>>,
}

impl CountingRuntime {
    pub fn local() -> Self {
        Self::wrap(Arc::new(LocalRuntime::new()))
    }

    pub fn wrap(inner: Arc<dyn Runtime>) -> Self {
        Self {
            inner,
            shell: AtomicUsize::new(0),
            script: AtomicUsize::new(0),
            api: AtomicUsize::new(0),
            simulate: None,
            starts: Mutex::new(Vec::new()),
        }
    }

    pub fn simulated(unit: Duration) -> Self {
        Self { simulate: Some(unit), ..Self::local() }
    }

    pub fn total(&self) -> usize {
        self.shell.load(Ordering::SeqCst) + self.script.load(Ordering::SeqCst) + self.api.load(Ordering::SeqCst)
    }

    pub fn scripts(&self) -> usize {
        self.script.load(Ordering::SeqCst)
    }
}

impl Runtime for CountingRuntime {
    fn run_shell(&self, command: &str, sandbox: &Path, timeout: Duration) -> Result<ExecutionResult, RuntimeError> {
        self.shell.fetch_add(1, Ordering::SeqCst);
        self.inner.run_shell(command, sandbox, timeout)
    }

    fn run_script_tool(
        &self,
        source: &str,
        invocation: &str,
        sandbox: &Path,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError> {
        self.script.fetch_add(1, Ordering::SeqCst);
        self.starts.lock().unwrap().push((Instant::now(), invocation.to_string()));
        if let Some(unit) = self.simulate {
            thread::sleep(unit);
            return Ok(ExecutionResult {
                stdout: String::new(),
                stderr: String::new(),
                exit_status: 0,
                duration_secs: unit.as_secs_f64(),
                structured_result: Some(json!({"result": invocation, "error": null})),
                env_before: None,
                env_after: None,
            });
        }
        self.inner.run_script_tool(source, invocation, sandbox, timeout)
    }

    fn call_api_tool(&self, endpoint: &ApiEndpoint, payload: &Value, timeout: Duration) -> Result<ExecutionResult, RuntimeError> {
        self.api.fetch_add(1, Ordering::SeqCst);
        self.inner.call_api_tool(endpoint, payload, timeout)
    }
}

/// One-thread HTTP/1.1 server answering every POST through `handler`.
pub struct StubServer {
    pub url: String,
    pub hits: Arc<AtomicUsize>,
}

impl StubServer {
    pub fn start<F>(handler: F) -> Self
    where
        F: Fn(&str, &str) -> (u16, String) + Send + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let hits = Arc::new(AtomicUsize::new(0));
        let counter = hits.clone();
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { continue };
                counter.fetch_add(1, Ordering::SeqCst);
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                if reader.read_line(&mut request_line).is_err() {
                    continue;
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("/").to_string();
                let mut length = 0usize;
                loop {
                    let mut line = String::new();
                    if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                        break;
                    }
                    if let Some((k, v)) = line.split_once(':') {
                        if k.eq_ignore_ascii_case("content-length") {
                            length = v.trim().parse().unwrap_or(0);
                        }
                    }
                }
                let mut body = vec![0u8; length];
                let _ = reader.read_exact(&mut body);
                let (status, reply) = handler(&path, &String::from_utf8_lossy(&body));
                let response = format!(
                    "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                    reply.len()
                );
                let _ = stream.write_all(response.as_bytes());
            }
        });
        Self { url, hits }
    }

    /// Echoes the request body back with status 200.
    pub fn echo() -> Self {
        Self::start(|_, body| (200, body.to_string()))
    }
}

pub const DARK_MODE_REQUEST: &str = "Change the system into the Dark mode";

/// Sandbox stand-in for the dark-mode tool: records the appearance setting
/// in a file instead of driving the desktop.
pub const DARK_MODE_TOOL: &str = r#"from base_action import BaseAction
import json
import os


class change_system_to_dark_mode(BaseAction):
    # Switches the system appearance to dark mode by writing the appearance
    # setting into appearance.json under the working directory.
    def __init__(self):
        self._description = "Change the system appearance to dark mode."

    def __call__(self, working_directory=None, *args, **kwargs):
        # working_directory: folder holding appearance.json, defaults to the current one
        base = working_directory or os.getcwd()
        path = os.path.join(base, "appearance.json")
        with open(path, "w", encoding="utf-8") as fh:
            json.dump({"mode": "dark"}, fh)
        return "appearance set to dark"
"#;

pub fn darkmode_backend() -> ScriptedBackend {
    let plan = json!({
        "change_system_to_dark_mode": {
            "name": "change_system_to_dark_mode",
            "description": DARK_MODE_REQUEST,
            "dependencies": [],
            "type": "Code"
        }
    });
    ScriptedBackend::new()
        .on(
            Purpose::Plan,
            &[DARK_MODE_REQUEST],
            format!("The request is a single operating-system change.\n```json\n{plan:#}\n```"),
        )
        .on(
            Purpose::GenerateTool,
            &["change_system_to_dark_mode"],
            format!(
                "```python\n{DARK_MODE_TOOL}```\n<invoke>change_system_to_dark_mode()()</invoke>\n<fake-params>None</fake-params>"
            ),
        )
        .on(
            Purpose::Critique,
            &["appearance.json"],
            r#"{"reasoning": "appearance.json now records dark mode and the tool takes the folder as a parameter.", "judge": true, "score": 9}"#,
        )
        .on(Purpose::Qa, &["All subtasks"], "The system is now in dark mode.")
}

/// A curriculum task: request, subtask name, subtask description, tool
/// description, critic score (None = always fails).
pub struct LessonSpec {
    pub request: &'static str,
    pub name: &'static str,
    pub description: &'static str,
    pub tool_description: &'static str,
    pub score: Option<u8>,
}

pub const CURRICULUM_OBJECTIVE: &str = "Learn to manage spreadsheet files with Python";

pub const LESSONS: [LessonSpec; 10] = [
    LessonSpec { request: "Create an empty sheet named budget", name: "make_budget_sheet", description: "Write an empty CSV file called budget.csv with a header row", tool_description: "Write a CSV header into a new file.", score: Some(9) },
    LessonSpec { request: "Record three expense rows", name: "append_expense_rows", description: "Append three expense lines to expenses.csv", tool_description: "Append rows to a comma separated log.", score: Some(9) },
    LessonSpec { request: "Count the expense rows", name: "count_expense_lines", description: "Count how many lines expenses.csv holds", tool_description: "Count lines of a text document.", score: Some(10) },
    LessonSpec { request: "Sum the expense amounts", name: "sum_amount_column", description: "Add up the amount column of expenses.csv", tool_description: "Total a numeric column.", score: Some(9) },
    LessonSpec { request: "Sort the expenses by amount", name: "sort_by_amount", description: "Order expenses.csv rows by amount descending into sorted.csv", tool_description: "Order table rows by one field.", score: Some(9) },
    LessonSpec { request: "Export the sheet as JSON", name: "export_sheet_json", description: "Convert sorted.csv into sorted.json records", tool_description: "Convert tabular data into JSON records.", score: Some(9) },
    LessonSpec { request: "Filter large expenses", name: "filter_large_rows", description: "Keep rows whose amount exceeds 100 in large.csv", tool_description: "Select table rows above a threshold.", score: Some(9) },
    LessonSpec { request: "Build a monthly summary", name: "monthly_summary", description: "Group expenses by month into summary.csv", tool_description: "Aggregate records per calendar month.", score: Some(9) },
    LessonSpec { request: "Highlight the maximum expense", name: "mark_maximum", description: "Flag the single biggest expense in flagged.csv", tool_description: "Flag the maximum entry.", score: Some(7) },
    LessonSpec { request: "Render an expense chart", name: "render_chart", description: "Draw a bar chart of monthly totals to chart.png", tool_description: "Plot monthly totals.", score: None },
];

/// Tool source for a lesson: writes `<name>.out` into the working
/// directory, or raises when `fail_tag` is given.
pub fn lesson_tool(spec: &LessonSpec, fail_tag: Option<&str>) -> String {
    let body = match fail_tag {
        Some(tag) => format!("        raise RuntimeError(\"plotting backend unavailable ({tag})\")\n"),
        None => format!(
            "        path = os.path.join(base, \"{name}.out\")\n        with open(path, \"w\", encoding=\"utf-8\") as fh:\n            fh.write(\"{name} done\\n\")\n        return \"{name}.out\"\n",
            name = spec.name
        ),
    };
    format!(
        "from base_action import BaseAction\nimport os\n\n\nclass {name}(BaseAction):\n    # {desc}\n    def __init__(self):\n        self._description = \"{desc}\"\n\n    def __call__(self, working_directory=None, *args, **kwargs):\n        # working_directory: output folder, defaults to the current one\n        base = working_directory or os.getcwd()\n{body}",
        name = spec.name,
        desc = spec.tool_description,
    )
}

pub fn curriculum_backend() -> ScriptedBackend {
    let tasks: Vec<Value> = LESSONS
        .iter()
        .enumerate()
        .map(|(i, l)| json!({"request": l.request, "difficulty": 1 + i / 3}))
        .collect();
    let mut backend = ScriptedBackend::new().on(
        Purpose::Curriculum,
        &[CURRICULUM_OBJECTIVE],
        format!("```json\n{:#}\n```", json!({ "tasks": tasks })),
    );
    for l in &LESSONS {
        let plan = json!({ l.name: {"name": l.name, "description": l.description, "dependencies": [], "type": "Code"} });
        let task_line = format!("Task: {}\n", l.request);
        backend = backend.on(Purpose::Plan, &[task_line.as_str()], format!("```json\n{plan}\n```"));
        let fence = |src: String, n: &str| format!("```python\n{src}```\n<invoke>{n}()()</invoke>\n<fake-params>None</fake-params>");
        let task_name = format!("Task Name: {}", l.name);
        match l.score {
            Some(score) => {
                backend = backend
                    .on(Purpose::GenerateTool, &[task_name.as_str()], fence(lesson_tool(l, None), l.name))
                    .on(
                        Purpose::Critique,
                        &[l.description],
                        json!({"reasoning": format!("{} completed.", l.name), "judge": true, "score": score}).to_string(),
                    );
            }
            None => {
                backend = backend
                    .on(Purpose::GenerateTool, &[task_name.as_str()], fence(lesson_tool(l, Some("v1")), l.name))
                    .on(
                        Purpose::Critique,
                        &[l.description],
                        json!({"reasoning": "The tool raised an error and produced no chart.", "judge": false, "score": 2}).to_string(),
                    )
                    .on(Purpose::Refine, &["(v1)"], fence(lesson_tool(l, Some("v2")), l.name))
                    .on(Purpose::Refine, &["(v2)"], fence(lesson_tool(l, Some("v3")), l.name));
            }
        }
    }
    backend.on(Purpose::Qa, &["All subtasks"], "Done.")
}

/// Backend wrapper counting requests per purpose.
pub struct Counted<B> {
    pub inner: B,
    counts: Mutex<std::collections::HashMap<Purpose, usize>>,
}

impl<B> Counted<B> {
    pub fn new(inner: B) -> Self {
        Self { inner, counts: Mutex::new(Default::default()) }
    }

    pub fn count(&self, purpose: Purpose) -> usize {
        self.counts.lock().unwrap().get(&purpose).copied().unwrap_or(0)
    }
}

impl<B: taskpilot_core::llm::ChatBackend> taskpilot_core::llm::ChatBackend for Counted<B> {
    fn complete(
        &self,
        request: &taskpilot_core::llm::ChatRequest,
    ) -> Result<String, taskpilot_core::llm::BackendError> {
        *self.counts.lock().unwrap().entry(request.purpose).or_default() += 1;
        self.inner.complete(request)
    }
}
