//! Subprocess launching with a wall-clock limit and whole-group cleanup.

use std::io::Read;
use std::os::unix::process::{CommandExt, ExitStatusExt};
use std::process::{Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use super::RuntimeError;

/// Bytes kept from each of stdout and stderr.
pub const MAX_CAPTURE_BYTES: usize = 1024 * 1024;

const POLL_INTERVAL: Duration = Duration::from_millis(5);

pub(crate) struct ProcessOutput {
    pub stdout: String,
    pub stderr: String,
    pub exit_status: i32,
    pub duration: Duration,
}

/// Runs `cmd` in its own process group. When the main child exits or the
/// timeout fires, the whole group is killed so background children cannot
/// outlive the call.
pub(crate) fn run_with_timeout(mut cmd: Command, timeout: Duration) -> Result<ProcessOutput, RuntimeError> {
    cmd.process_group(0).stdin(Stdio::null()).stdout(Stdio::piped()).stderr(Stdio::piped());
    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| RuntimeError::SpawnFailure(e.to_string()))?;
    let pgid = child.id() as libc::pid_t;

    let stdout = child.stdout.take().map(capture);
    let stderr = child.stderr.take().map(capture);

    let status = loop {
        match child.try_wait() {
            Ok(Some(status)) => break Some(status),
            Ok(None) if started.elapsed() >= timeout => break None,
            Ok(None) => thread::sleep(POLL_INTERVAL),
            Err(e) => {
                kill_group(pgid);
                let _ = child.wait();
                return Err(RuntimeError::SpawnFailure(e.to_string()));
            }
        }
    };
    kill_group(pgid);
    let status = match status {
        Some(s) => s,
        None => {
            let _ = child.wait();
            join(stdout);
            join(stderr);
            return Err(RuntimeError::Timeout(timeout));
        }
    };
    let exit_status = status.code().unwrap_or_else(|| 128 + status.signal().unwrap_or(0));
    Ok(ProcessOutput { stdout: join(stdout), stderr: join(stderr), exit_status, duration: started.elapsed() })
}

fn kill_group(pgid: libc::pid_t) {
    // SAFETY: signalling a process group we created; ESRCH when it is
    // already gone is fine.
    unsafe {
        libc::kill(-pgid, libc::SIGKILL);
    }
}

fn capture<R: Read + Send + 'static>(mut src: R) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let mut kept = Vec::new();
        let mut buf = [0u8; 8192];
        loop {
            match src.read(&mut buf) {
                Ok(0) | Err(_) => break,
                Ok(n) => {
                    let room = MAX_CAPTURE_BYTES.saturating_sub(kept.len());
                    kept.extend_from_slice(&buf[..n.min(room)]);
                }
            }
        }
        String::from_utf8_lossy(&kept).into_owned()
    })
}

fn join(handle: Option<thread::JoinHandle<String>>) -> String {
    handle.and_then(|h| h.join().ok()).unwrap_or_default()
}
