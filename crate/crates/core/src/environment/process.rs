use std::os::unix::process::ExitStatusExt;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use tokio::io::{AsyncRead, AsyncReadExt};

use super::{EnvError, ExecResult, TIMEOUT_EXIT_CODE};

/// Largest file a sandboxed process may write.
const SANDBOX_FSIZE_LIMIT: libc::rlim_t = 64 * 1024 * 1024;

pub(super) struct Spawn {
    pub program: String,
    pub args: Vec<String>,
    pub cwd: PathBuf,
    pub sandboxed: bool,
    pub network: bool,
    pub output_cap: usize,
}

pub(super) fn kill_group(pgid: i32) {
    if pgid > 0 {
        // SAFETY: killpg has no memory-safety preconditions; ESRCH is expected
        // when the group already exited.
        unsafe {
            libc::killpg(pgid, libc::SIGKILL);
        }
    }
}

pub(super) fn on_path(program: &str) -> bool {
    if program.contains('/') {
        return std::path::Path::new(program).is_file();
    }
    std::env::var_os("PATH")
        .map(|paths| std::env::split_paths(&paths).any(|dir| dir.join(program).is_file()))
        .unwrap_or(false)
}

fn can_unshare_network() -> bool {
    static PROBE: OnceLock<bool> = OnceLock::new();
    *PROBE.get_or_init(|| {
        let ok = std::process::Command::new("unshare")
            .args(["-rn", "true"])
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .map(|s| s.success())
            .unwrap_or(false);
        if !ok {
            tracing::warn!(
                "network namespaces unavailable; sandbox falls back to proxy blackholing"
            );
        }
        ok
    })
}

/// Run to completion or kill the process group at `timeout`. `track` is told
/// when the group becomes live and when it is reaped.
pub(super) async fn run(
    spec: Spawn,
    timeout: Duration,
    track: impl Fn(i32, bool),
) -> Result<ExecResult, EnvError> {
    let isolate = spec.sandboxed && !spec.network;
    let mut cmd = if isolate && can_unshare_network() {
        let mut c = tokio::process::Command::new("unshare");
        c.arg("-rn").arg(&spec.program).args(&spec.args);
        c
    } else {
        let mut c = tokio::process::Command::new(&spec.program);
        c.args(&spec.args);
        if isolate {
            for var in ["http_proxy", "https_proxy", "HTTP_PROXY", "HTTPS_PROXY", "ALL_PROXY"] {
                c.env(var, "http://127.0.0.1:9");
            }
        }
        c
    };
    cmd.current_dir(&spec.cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .kill_on_drop(true)
        .process_group(0);
    if spec.sandboxed {
        // SAFETY: only async-signal-safe setrlimit calls between fork and exec.
        unsafe {
            cmd.pre_exec(|| {
                let core = libc::rlimit {
                    rlim_cur: 0,
                    rlim_max: 0,
                };
                let fsize = libc::rlimit {
                    rlim_cur: SANDBOX_FSIZE_LIMIT,
                    rlim_max: SANDBOX_FSIZE_LIMIT,
                };
                libc::setrlimit(libc::RLIMIT_CORE, &core);
                libc::setrlimit(libc::RLIMIT_FSIZE, &fsize);
                Ok(())
            });
        }
    }

    let start = Instant::now();
    let mut child = cmd
        .spawn()
        .map_err(|e| EnvError::Spawn(format!("{}: {e}", spec.program)))?;
    let pgid = child.id().map(|p| p as i32).unwrap_or(0);
    track(pgid, true);

    let cap = spec.output_cap;
    let stdout = child.stdout.take().expect("piped stdout");
    let stderr = child.stderr.take().expect("piped stderr");
    let out_task = tokio::spawn(read_capped(stdout, cap));
    let err_task = tokio::spawn(read_capped(stderr, cap));

    let exit_code = match tokio::time::timeout(timeout, child.wait()).await {
        Ok(Ok(status)) => status
            .code()
            .unwrap_or_else(|| 128 + status.signal().unwrap_or(0)),
        Ok(Err(e)) => {
            kill_group(pgid);
            track(pgid, false);
            return Err(EnvError::Spawn(e.to_string()));
        }
        Err(_) => {
            kill_group(pgid);
            let _ = child.wait().await;
            TIMEOUT_EXIT_CODE
        }
    };
    // Background children of a finished command die with the group.
    kill_group(pgid);
    track(pgid, false);

    let join = |t: tokio::task::JoinHandle<(Vec<u8>, u64)>| async move {
        match tokio::time::timeout(Duration::from_secs(2), t).await {
            Ok(Ok(v)) => v,
            _ => (Vec::new(), 0),
        }
    };
    let (out, out_total) = join(out_task).await;
    let (err, err_total) = join(err_task).await;
    let wall_time_ms = start.elapsed().as_millis() as u64;

    Ok(ExecResult {
        truncated: out_total > out.len() as u64 || err_total > err.len() as u64,
        stdout: utf8_prefix(out),
        stderr: utf8_prefix(err),
        exit_code,
        wall_time_ms,
        stdout_bytes: out_total,
        stderr_bytes: err_total,
    })
}

async fn read_capped<R: AsyncRead + Unpin>(mut r: R, cap: usize) -> (Vec<u8>, u64) {
    let mut buf = Vec::new();
    let mut total = 0u64;
    let mut chunk = [0u8; 8192];
    loop {
        match r.read(&mut chunk).await {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                total += n as u64;
                if buf.len() < cap {
                    let take = n.min(cap - buf.len());
                    buf.extend_from_slice(&chunk[..take]);
                }
            }
        }
    }
    (buf, total)
}

/// Decode bytes, dropping a multi-byte character split by the cap.
pub(super) fn utf8_prefix(mut bytes: Vec<u8>) -> String {
    if let Err(e) = std::str::from_utf8(&bytes) {
        if e.error_len().is_none() {
            bytes.truncate(e.valid_up_to());
        }
    }
    String::from_utf8_lossy(&bytes).into_owned()
}
