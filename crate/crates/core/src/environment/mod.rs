//! Execution environments: the substrate tools act on.
//!
//! Three backends are available. `local_shell` runs commands on the host in
//! a per-session scratch directory. `sandbox` adds resource limits, network
//! isolation (when the host allows unprivileged namespaces) and code
//! execution through a configurable interpreter. `mock` answers from a
//! script and never spawns a process.
//!
//! Scratch layout: `<workdir>/sessions/<session_id>/`.

mod mock;
mod process;

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::config::{resolve_env_name, EnvSpec};

pub use mock::{ExecKind, MockMatcher, MockRule, MockScript};

/// Exit code reported when a command is killed at its timeout.
pub const TIMEOUT_EXIT_CODE: i32 = -1001;

/// Per-stream output cap in bytes.
pub const DEFAULT_OUTPUT_CAP: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    LocalShell,
    Sandbox,
    Mock,
}

impl Backend {
    pub fn as_str(&self) -> &'static str {
        match self {
            Backend::LocalShell => "local_shell",
            Backend::Sandbox => "sandbox",
            Backend::Mock => "mock",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lifecycle {
    Created,
    Ready,
    Closed,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ExecResult {
    /// At most the output cap; see `stdout_bytes` for the original size.
    pub stdout: String,
    pub stderr: String,
    pub exit_code: i32,
    pub wall_time_ms: u64,
    pub truncated: bool,
    pub stdout_bytes: u64,
    pub stderr_bytes: u64,
}

impl ExecResult {
    pub fn ok(stdout: impl Into<String>) -> Self {
        let stdout = stdout.into();
        Self {
            stdout_bytes: stdout.len() as u64,
            stdout,
            ..Default::default()
        }
    }

    pub fn failed(exit_code: i32, stderr: impl Into<String>) -> Self {
        let stderr = stderr.into();
        Self {
            exit_code,
            stderr_bytes: stderr.len() as u64,
            stderr,
            ..Default::default()
        }
    }

    pub fn timed_out(&self) -> bool {
        self.exit_code == TIMEOUT_EXIT_CODE
    }

    /// Text handed to the model: stdout, a marker line when truncated, then stderr.
    pub fn render(&self) -> String {
        let mut out = self.stdout.clone();
        if self.truncated && self.stdout_bytes > self.stdout.len() as u64 {
            if !out.ends_with('\n') {
                out.push('\n');
            }
            out.push_str(&format!("[output truncated: {} bytes total]\n", self.stdout_bytes));
        }
        if !self.stderr.is_empty() {
            out.push_str(&self.stderr);
            if self.truncated && self.stderr_bytes > self.stderr.len() as u64 {
                out.push_str(&format!(
                    "\n[stderr truncated: {} bytes total]\n",
                    self.stderr_bytes
                ));
            }
        }
        if self.timed_out() {
            out.push_str("[timed out]");
        }
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EnvError {
    #[error("unknown env backend '{0}'")]
    UnknownBackend(String),
    #[error("cannot allocate environment resources: {0}")]
    Resource(String),
    #[error("environment {0} is closed")]
    Closed(String),
    #[error("failed to spawn process: {0}")]
    Spawn(String),
    #[error("no interpreter available (tried {0})")]
    InterpreterMissing(String),
    #[error("{0} backend does not support code execution")]
    Unsupported(&'static str),
    #[error("invalid environment option: {0}")]
    InvalidOption(String),
}

/// Where sessions live and what the mock backend answers when a config does
/// not carry its own script.
#[derive(Clone)]
pub struct EnvProvider {
    pub workdir: PathBuf,
    pub mock_script: MockScript,
}

impl Default for EnvProvider {
    fn default() -> Self {
        let workdir = std::env::var_os("AGENTRY_WORKDIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| std::env::temp_dir().join("agentry"));
        Self {
            workdir,
            mock_script: MockScript::default(),
        }
    }
}

impl EnvProvider {
    pub fn new(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: workdir.into(),
            mock_script: MockScript::default(),
        }
    }

    pub fn with_mock_script(mut self, script: MockScript) -> Self {
        self.mock_script = script;
        self
    }

    pub fn create(&self, spec: &EnvSpec) -> Result<EnvHandle, EnvError> {
        create_env_in(spec, self)
    }
}

/// Create an environment using the default provider.
pub fn create_env(spec: &EnvSpec) -> Result<EnvHandle, EnvError> {
    create_env_in(spec, &EnvProvider::default())
}

pub fn create_env_in(spec: &EnvSpec, provider: &EnvProvider) -> Result<EnvHandle, EnvError> {
    let (resolved, alias) =
        resolve_env_name(&spec.name).ok_or_else(|| EnvError::UnknownBackend(spec.name.clone()))?;
    let mut warnings = Vec::new();
    if alias {
        let w = format!(
            "env backend '{}' is deprecated here; running on local '{resolved}'",
            spec.name
        );
        tracing::warn!("{w}");
        warnings.push(w);
    }
    let backend = match resolved {
        "local_shell" => Backend::LocalShell,
        "sandbox" => Backend::Sandbox,
        _ => Backend::Mock,
    };
    let opts = EnvOptions::from_spec(spec, provider)?;
    let session_id = uuid::Uuid::new_v4().simple().to_string();

    let scratch = if backend == Backend::Mock {
        None
    } else {
        let dir = opts.workdir.join("sessions").join(&session_id);
        std::fs::create_dir_all(&dir)
            .map_err(|e| EnvError::Resource(format!("{}: {e}", dir.display())))?;
        Some(dir)
    };

    let handle = EnvHandle {
        inner: Arc::new(EnvInner {
            backend,
            session_id,
            scratch,
            opts,
            warnings,
            seq: AtomicU64::new(0),
            state: Mutex::new(EnvState {
                lifecycle: Lifecycle::Created,
                last_exit_code: None,
                live_groups: HashSet::new(),
            }),
        }),
    };
    handle.inner.state.lock().lifecycle = Lifecycle::Ready;
    Ok(handle)
}

#[derive(Clone)]
struct EnvOptions {
    workdir: PathBuf,
    interpreter: Option<String>,
    network: bool,
    output_cap: usize,
    mock: MockScript,
}

impl EnvOptions {
    fn from_spec(spec: &EnvSpec, provider: &EnvProvider) -> Result<Self, EnvError> {
        let c = &spec.config;
        let workdir = match c.get("workdir") {
            Some(v) => PathBuf::from(
                v.as_str()
                    .ok_or_else(|| EnvError::InvalidOption("workdir must be a string".into()))?,
            ),
            None => provider.workdir.clone(),
        };
        let interpreter = match c.get("interpreter") {
            Some(v) => Some(
                v.as_str()
                    .ok_or_else(|| EnvError::InvalidOption("interpreter must be a string".into()))?
                    .to_string(),
            ),
            None => None,
        };
        let network = c.get("network").and_then(|v| v.as_bool()).unwrap_or(false);
        let output_cap = c
            .get("output_cap")
            .and_then(|v| v.as_u64())
            .map(|n| n as usize)
            .unwrap_or(DEFAULT_OUTPUT_CAP);
        let mock = match c.get("script") {
            Some(v) => MockScript::from_json_value(v.clone())
                .map_err(|e| EnvError::InvalidOption(format!("mock script: {e}")))?,
            None => provider.mock_script.clone(),
        };
        Ok(Self {
            workdir,
            interpreter,
            network,
            output_cap,
            mock,
        })
    }
}

struct EnvState {
    lifecycle: Lifecycle,
    last_exit_code: Option<i32>,
    live_groups: HashSet<i32>,
}

struct EnvInner {
    backend: Backend,
    session_id: String,
    scratch: Option<PathBuf>,
    opts: EnvOptions,
    warnings: Vec<String>,
    seq: AtomicU64,
    state: Mutex<EnvState>,
}

impl EnvInner {
    fn shutdown(&self) {
        let groups: Vec<i32> = {
            let mut st = self.state.lock();
            st.lifecycle = Lifecycle::Closed;
            st.live_groups.drain().collect()
        };
        for pgid in groups {
            process::kill_group(pgid);
        }
        if let Some(dir) = &self.scratch {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
}

impl Drop for EnvInner {
    fn drop(&mut self) {
        if self.state.lock().lifecycle != Lifecycle::Closed {
            self.shutdown();
        }
    }
}

/// A live environment session. Cheap to clone; all clones share one session.
#[derive(Clone)]
pub struct EnvHandle {
    inner: Arc<EnvInner>,
}

impl std::fmt::Debug for EnvHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EnvHandle")
            .field("backend", &self.inner.backend)
            .field("session_id", &self.inner.session_id)
            .field("lifecycle", &self.lifecycle())
            .finish()
    }
}

impl EnvHandle {
    pub fn backend(&self) -> Backend {
        self.inner.backend
    }

    pub fn session_id(&self) -> &str {
        &self.inner.session_id
    }

    pub fn lifecycle(&self) -> Lifecycle {
        self.inner.state.lock().lifecycle
    }

    pub fn scratch_dir(&self) -> Option<&Path> {
        self.inner.scratch.as_deref()
    }

    pub fn warnings(&self) -> &[String] {
        &self.inner.warnings
    }

    pub fn output_cap(&self) -> usize {
        self.inner.opts.output_cap
    }

    pub fn state_snapshot(&self) -> BTreeMap<String, serde_json::Value> {
        let st = self.inner.state.lock();
        let mut m = BTreeMap::new();
        m.insert("backend".into(), self.inner.backend.as_str().into());
        m.insert("session_id".into(), self.inner.session_id.clone().into());
        m.insert(
            "lifecycle".into(),
            serde_json::to_value(st.lifecycle).unwrap_or_default(),
        );
        m.insert(
            "cwd".into(),
            self.inner
                .scratch
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_else(|| "/".into())
                .into(),
        );
        m.insert(
            "last_exit_code".into(),
            st.last_exit_code.map(serde_json::Value::from).unwrap_or_default(),
        );
        m
    }

    fn ensure_ready(&self) -> Result<(), EnvError> {
        match self.lifecycle() {
            Lifecycle::Ready => Ok(()),
            _ => Err(EnvError::Closed(self.inner.session_id.clone())),
        }
    }

    fn record_exit(&self, r: &ExecResult) {
        self.inner.state.lock().last_exit_code = Some(r.exit_code);
    }

    /// Run a shell command, killing its whole process group at `timeout`.
    pub async fn exec_command(&self, command: &str, timeout: Duration) -> Result<ExecResult, EnvError> {
        self.ensure_ready()?;
        let result = match self.inner.backend {
            Backend::Mock => {
                mock::run(&self.inner.opts.mock, ExecKind::Command, command, timeout, self.output_cap())
                    .await
            }
            backend => {
                let spec = process::Spawn {
                    program: "sh".into(),
                    args: vec!["-c".into(), command.into()],
                    cwd: self.inner.scratch.clone().expect("process backends have scratch"),
                    sandboxed: backend == Backend::Sandbox,
                    network: self.inner.opts.network,
                    output_cap: self.output_cap(),
                };
                process::run(spec, timeout, |pgid, live| {
                    let mut st = self.inner.state.lock();
                    if live {
                        st.live_groups.insert(pgid);
                    } else {
                        st.live_groups.remove(&pgid);
                    }
                })
                .await?
            }
        };
        self.record_exit(&result);
        Ok(result)
    }

    /// Write `source` to a scratch file and run it with the sandbox interpreter.
    pub async fn exec_code(&self, source: &str, timeout: Duration) -> Result<ExecResult, EnvError> {
        self.ensure_ready()?;
        if source.trim().is_empty() {
            return Err(EnvError::InvalidOption("source must not be empty".into()));
        }
        let result = match self.inner.backend {
            Backend::Mock => {
                mock::run(&self.inner.opts.mock, ExecKind::Code, source, timeout, self.output_cap())
                    .await
            }
            Backend::LocalShell => return Err(EnvError::Unsupported("local_shell")),
            Backend::Sandbox => {
                let interpreter = self.interpreter()?;
                let n = self.inner.seq.fetch_add(1, Ordering::Relaxed);
                let ext = if interpreter.contains("python") { "py" } else { "src" };
                let scratch = self.inner.scratch.clone().expect("sandbox has scratch");
                let file = scratch.join(format!("snippet_{n}.{ext}"));
                std::fs::write(&file, source)
                    .map_err(|e| EnvError::Resource(format!("{}: {e}", file.display())))?;
                let spec = process::Spawn {
                    program: interpreter,
                    args: vec![file.display().to_string()],
                    cwd: scratch,
                    sandboxed: true,
                    network: self.inner.opts.network,
                    output_cap: self.output_cap(),
                };
                process::run(spec, timeout, |pgid, live| {
                    let mut st = self.inner.state.lock();
                    if live {
                        st.live_groups.insert(pgid);
                    } else {
                        st.live_groups.remove(&pgid);
                    }
                })
                .await?
            }
        };
        self.record_exit(&result);
        Ok(result)
    }

    fn interpreter(&self) -> Result<String, EnvError> {
        if let Some(i) = &self.inner.opts.interpreter {
            return if process::on_path(i) {
                Ok(i.clone())
            } else {
                Err(EnvError::InterpreterMissing(i.clone()))
            };
        }
        default_interpreter().ok_or_else(|| EnvError::InterpreterMissing("python3, python".into()))
    }

    /// Release processes and the scratch directory. Safe to call repeatedly.
    pub fn close(&self) {
        if self.lifecycle() != Lifecycle::Closed {
            self.inner.shutdown();
        }
    }
}

/// First scripting interpreter found on `PATH`.
pub fn default_interpreter() -> Option<String> {
    ["python3", "python"]
        .into_iter()
        .find(|c| process::on_path(c))
        .map(str::to_string)
}

/// `close_env` as a free function.
pub fn close_env(h: &EnvHandle) {
    h.close()
}
