//! Execution runtimes: system shell, script tools through the harness
//! driver, and JSON tool services.
//!
//! Every shell or script invocation runs with its working directory set to
//! a sandbox, a trimmed environment (`HOME` and `TMPDIR` point inside the
//! sandbox) and a wall-clock timeout that kills the whole process group.

mod harness;
mod process;

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::env::{snapshot_environment, EnvError, EnvSnapshot, HARNESS_DIR};
use crate::http::{HttpError, HttpTransport, UreqTransport};

pub use harness::{parse_harness_output, HarnessOutput, DRIVER_SOURCE, RESULT_MARKER};
pub use process::MAX_CAPTURE_BYTES;

pub const DEFAULT_SHELL_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_SCRIPT_TIMEOUT: Duration = Duration::from_secs(60);
pub const DEFAULT_API_TIMEOUT: Duration = Duration::from_secs(30);

const DEFAULT_PATH: &str = "/usr/local/bin:/usr/bin:/bin";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuntimeKind {
    Shell,
    ScriptTool,
    ApiCall,
    GuiControl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub stdout: String,
    pub stderr: String,
    pub exit_status: i32,
    pub duration_secs: f64,
    /// Decoded `{"result", "error"}` payload for script tools, or the parsed
    /// response body for API calls.
    pub structured_result: Option<Value>,
    pub env_before: Option<EnvSnapshot>,
    pub env_after: Option<EnvSnapshot>,
}

impl ExecutionResult {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0 && self.tool_error().is_none()
    }

    /// The harness `error` field when it is a non-null string.
    pub fn tool_error(&self) -> Option<&str> {
        self.structured_result.as_ref()?.get("error")?.as_str()
    }

    /// A failed result that never ran, used when an attempt is rejected
    /// before or during dispatch.
    pub fn rejected(reason: impl Into<String>, before: Option<EnvSnapshot>) -> Self {
        Self {
            stdout: String::new(),
            stderr: reason.into(),
            exit_status: -1,
            duration_secs: 0.0,
            structured_result: None,
            env_after: before.clone(),
            env_before: before,
        }
    }
}

/// Where and how to reach a tool service.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiEndpoint {
    pub url: String,
    #[serde(default = "default_method")]
    pub method: String,
    /// Free-text description of the expected JSON body.
    #[serde(default)]
    pub request_schema: String,
}

fn default_method() -> String {
    "POST".to_string()
}

impl ApiEndpoint {
    pub fn post(url: impl Into<String>, request_schema: impl Into<String>) -> Self {
        Self { url: url.into(), method: default_method(), request_schema: request_schema.into() }
    }
}

/// A concrete action ready for dispatch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InvocationPlan {
    pub tool_name: String,
    pub invocation: String,
    pub kind: RuntimeKind,
    /// Script source for [`RuntimeKind::ScriptTool`].
    pub source: Option<String>,
    pub endpoint: Option<ApiEndpoint>,
    /// JSON body for [`RuntimeKind::ApiCall`].
    pub payload: Option<Value>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Timeouts {
    pub shell: Duration,
    pub script: Duration,
    pub api: Duration,
}

impl Default for Timeouts {
    fn default() -> Self {
        Self { shell: DEFAULT_SHELL_TIMEOUT, script: DEFAULT_SCRIPT_TIMEOUT, api: DEFAULT_API_TIMEOUT }
    }
}

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("execution timed out after {0:?}")]
    Timeout(Duration),
    #[error("failed to start process: {0}")]
    SpawnFailure(String),
    #[error("harness protocol violation: {reason}")]
    HarnessProtocolViolation { reason: String, partial: Box<ExecutionResult> },
    #[error("connection failure: {0}")]
    ConnectionFailure(String),
    #[error("{0:?} runtime is not supported")]
    UnsupportedRuntime(RuntimeKind),
    #[error("invalid invocation: {0}")]
    InvalidInput(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// The universal execution interface the actor dispatches through.
pub trait Runtime: Send + Sync {
    fn run_shell(&self, command: &str, sandbox: &Path, timeout: Duration) -> Result<ExecutionResult, RuntimeError>;

    fn run_script_tool(
        &self,
        source: &str,
        invocation: &str,
        sandbox: &Path,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError>;

    fn call_api_tool(
        &self,
        endpoint: &ApiEndpoint,
        payload: &Value,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError>;

    /// Mouse/keyboard control is a declared runtime kind with no backend.
    fn gui_control(&self, _action: &str) -> Result<ExecutionResult, RuntimeError> {
        Err(RuntimeError::UnsupportedRuntime(RuntimeKind::GuiControl))
    }

    fn dispatch(
        &self,
        plan: &InvocationPlan,
        sandbox: &Path,
        timeouts: &Timeouts,
    ) -> Result<ExecutionResult, RuntimeError> {
        match plan.kind {
            RuntimeKind::Shell => self.run_shell(&plan.invocation, sandbox, timeouts.shell),
            RuntimeKind::ScriptTool => {
                let source =
                    plan.source.as_deref().ok_or_else(|| RuntimeError::InvalidInput("script plan has no source".into()))?;
                self.run_script_tool(source, &plan.invocation, sandbox, timeouts.script)
            }
            RuntimeKind::ApiCall => {
                let endpoint =
                    plan.endpoint.as_ref().ok_or_else(|| RuntimeError::InvalidInput("API plan has no endpoint".into()))?;
                let payload = plan.payload.clone().unwrap_or(Value::Object(Default::default()));
                self.call_api_tool(endpoint, &payload, timeouts.api)
            }
            RuntimeKind::GuiControl => self.gui_control(&plan.invocation),
        }
    }
}

impl<R: Runtime + ?Sized> Runtime for Arc<R> {
    fn run_shell(&self, command: &str, sandbox: &Path, timeout: Duration) -> Result<ExecutionResult, RuntimeError> {
        (**self).run_shell(command, sandbox, timeout)
    }
    fn run_script_tool(
        &self,
        source: &str,
        invocation: &str,
        sandbox: &Path,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError> {
        (**self).run_script_tool(source, invocation, sandbox, timeout)
    }
    fn call_api_tool(
        &self,
        endpoint: &ApiEndpoint,
        payload: &Value,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError> {
        (**self).call_api_tool(endpoint, payload, timeout)
    }
    fn gui_control(&self, action: &str) -> Result<ExecutionResult, RuntimeError> {
        (**self).gui_control(action)
    }
}

/// Runs commands on the local machine.
pub struct LocalRuntime {
    python: String,
    path_var: String,
    transport: Arc<dyn HttpTransport>,
    locks: Mutex<HashMap<PathBuf, Arc<Mutex<()>>>>,
}

impl Default for LocalRuntime {
    fn default() -> Self {
        Self::new()
    }
}

impl LocalRuntime {
    pub fn new() -> Self {
        Self {
            python: "python3".into(),
            path_var: DEFAULT_PATH.into(),
            transport: Arc::new(UreqTransport),
            locks: Mutex::new(HashMap::new()),
        }
    }

    pub fn with_python(mut self, python: impl Into<String>) -> Self {
        self.python = python.into();
        self
    }

    pub fn with_transport(mut self, transport: Arc<dyn HttpTransport>) -> Self {
        self.transport = transport;
        self
    }

    /// One lock per sandbox: invocations in the same sandbox never overlap.
    fn sandbox_lock(&self, sandbox: &Path) -> Arc<Mutex<()>> {
        let key = sandbox.canonicalize().unwrap_or_else(|_| sandbox.to_path_buf());
        self.locks.lock().expect("sandbox lock table").entry(key).or_default().clone()
    }

    fn confined(&self, program: &str, sandbox: &Path) -> Result<Command, RuntimeError> {
        let tmp = sandbox.join(HARNESS_DIR).join("tmp");
        fs::create_dir_all(&tmp).map_err(|e| RuntimeError::SpawnFailure(e.to_string()))?;
        let mut cmd = Command::new(program);
        cmd.current_dir(sandbox)
            .env_clear()
            .env("PATH", &self.path_var)
            .env("HOME", sandbox)
            .env("TMPDIR", &tmp)
            .env("LANG", "C.UTF-8")
            .env("LC_ALL", "C.UTF-8")
            .env("PYTHONDONTWRITEBYTECODE", "1")
            .env("PYTHONIOENCODING", "utf-8");
        Ok(cmd)
    }
}

fn check_sandbox(sandbox: &Path) -> Result<(), RuntimeError> {
    if !sandbox.is_dir() {
        return Err(EnvError::PathMissing(sandbox.to_path_buf()).into());
    }
    Ok(())
}

impl Runtime for LocalRuntime {
    fn run_shell(&self, command: &str, sandbox: &Path, timeout: Duration) -> Result<ExecutionResult, RuntimeError> {
        if command.trim().is_empty() {
            return Err(RuntimeError::InvalidInput("empty shell command".into()));
        }
        check_sandbox(sandbox)?;
        let lock = self.sandbox_lock(sandbox);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());

        let before = snapshot_environment(sandbox)?;
        let mut cmd = self.confined("/bin/sh", sandbox)?;
        cmd.arg("-c").arg(command);
        let out = process::run_with_timeout(cmd, timeout)?;
        let after = snapshot_environment(sandbox)?;
        Ok(ExecutionResult {
            stdout: out.stdout,
            stderr: out.stderr,
            exit_status: out.exit_status,
            duration_secs: out.duration.as_secs_f64(),
            structured_result: None,
            env_before: Some(before),
            env_after: Some(after),
        })
    }

    fn run_script_tool(
        &self,
        source: &str,
        invocation: &str,
        sandbox: &Path,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError> {
        if source.trim().is_empty() || invocation.trim().is_empty() {
            return Err(RuntimeError::InvalidInput("script tool needs both source and invocation".into()));
        }
        check_sandbox(sandbox)?;
        let lock = self.sandbox_lock(sandbox);
        let _guard = lock.lock().unwrap_or_else(|p| p.into_inner());

        let before = snapshot_environment(sandbox)?;
        let dir = sandbox.join(HARNESS_DIR);
        let write = |name: &str, text: &str| {
            fs::write(dir.join(name), text).map_err(|e| RuntimeError::SpawnFailure(format!("writing {name}: {e}")))
        };
        fs::create_dir_all(&dir).map_err(|e| RuntimeError::SpawnFailure(e.to_string()))?;
        write("driver.py", DRIVER_SOURCE)?;
        write("tool.py", source)?;
        write("invocation.txt", invocation)?;

        let mut cmd = self.confined(&self.python, sandbox)?;
        cmd.arg("-B")
            .arg(dir.join("driver.py"))
            .arg(dir.join("tool.py"))
            .arg(dir.join("invocation.txt"));
        let out = process::run_with_timeout(cmd, timeout)?;
        let after = snapshot_environment(sandbox)?;

        let mut result = ExecutionResult {
            stdout: out.stdout,
            stderr: out.stderr,
            exit_status: out.exit_status,
            duration_secs: out.duration.as_secs_f64(),
            structured_result: None,
            env_before: Some(before),
            env_after: Some(after),
        };
        match parse_harness_output(&result.stdout) {
            Ok(parsed) => {
                result.stdout = parsed.free_text;
                result.structured_result = Some(parsed.payload);
                Ok(result)
            }
            Err(reason) => Err(RuntimeError::HarnessProtocolViolation { reason, partial: Box::new(result) }),
        }
    }

    fn call_api_tool(
        &self,
        endpoint: &ApiEndpoint,
        payload: &Value,
        timeout: Duration,
    ) -> Result<ExecutionResult, RuntimeError> {
        if !endpoint.method.eq_ignore_ascii_case("POST") {
            return Err(RuntimeError::InvalidInput(format!("tool services are POST-only, got {}", endpoint.method)));
        }
        let started = Instant::now();
        let resp = self.transport.post_json(&endpoint.url, &[], &payload.to_string(), timeout).map_err(|e| match e {
            HttpError::Timeout(d) => RuntimeError::Timeout(d),
            HttpError::Connection(m) | HttpError::Other(m) => RuntimeError::ConnectionFailure(m),
        })?;
        let structured = serde_json::from_str::<Value>(&resp.body).ok();
        let (stdout, stderr, exit_status) = if resp.is_success() {
            (resp.body, String::new(), 0)
        } else {
            (String::new(), resp.body, i32::from(resp.status))
        };
        Ok(ExecutionResult {
            stdout,
            stderr,
            exit_status,
            duration_secs: started.elapsed().as_secs_f64(),
            structured_result: structured,
            env_before: None,
            env_after: None,
        })
    }
}
