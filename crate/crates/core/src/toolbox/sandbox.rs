use std::io::{Read, Write};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{Arc, Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Modules the agent may never import.
pub const BLOCKED_MODULES: &[&str] = &[
    "os", "sys", "subprocess", "socket", "signal", "multiprocessing", "threading", "ssl", "pdb", "resource",
    "xmlrpc",
];

/// Further modules that would reach the file system, the network or the
/// interpreter internals by another route.
const ESCAPE_MODULES: &[&str] = &[
    "importlib", "pathlib", "shutil", "io", "ctypes", "tempfile", "glob", "urllib", "http", "ftplib", "smtplib",
    "telnetlib", "asyncio", "socketserver", "posix", "_posixsubprocess", "_socket", "_thread", "pty", "fcntl",
    "mmap", "webbrowser", "sqlite3", "gc", "inspect",
];

const SENTINEL: &str = "__SANDBOX_BLOCKED_IMPORT__:";

const RUNNER: &str = r#"
import builtins as _b, sys as _s, traceback as _tb
def _install():
    blocked = frozenset(@BLOCKED@)
    hits = []
    real_import = _b.__import__
    modules = _s.modules
    def guard(name, globals=None, locals=None, fromlist=(), level=0):
        if level == 0:
            g = globals if isinstance(globals, dict) else {}
            owner_name = g.get('__name__')
            owner = modules.get(owner_name) if isinstance(owner_name, str) else None
            trusted = owner is not None and owner_name != '__sandbox__' and getattr(owner, '__dict__', None) is g
            root = name.partition('.')[0]
            if not trusted and root in blocked:
                hits.append(root)
                raise ImportError("import of '%s' is blocked in this sandbox" % root, name=root)
        return real_import(name, globals, locals, fromlist, level)
    return guard, hits
_guard, _hits = _install()
_src = _s.stdin.read()
_out, _err = _s.stdout, _s.stderr
def _no_open(*args, **kwargs):
    raise PermissionError("file access is disabled in this sandbox")
_b.__import__ = _guard
_b.open = _no_open
_g = {'__name__': '__sandbox__', '__builtins__': _b}
_code = 0
try:
    exec(compile(_src, '<code>', 'exec'), _g)
except SystemExit as e:
    _code = 0 if e.code in (None, 0) else 1
except BaseException as e:
    _tb.print_exception(type(e), e, e.__traceback__.tb_next)
    _code = 1
try:
    _out.flush()
except BaseException:
    pass
if _hits:
    _err.write("\n@SENTINEL@%s\n" % _hits[0])
_err.flush()
_s.exit(_code)
"#;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecOutcome {
    Ok,
    Error,
    Timeout,
    BlockedImport { module: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResult {
    pub stdout: String,
    pub stderr: String,
    pub outcome: ExecOutcome,
    /// Seconds.
    pub wall_time: f64,
}

impl ExecutionResult {
    pub fn observation(&self) -> String {
        let mut s = match &self.outcome {
            ExecOutcome::Ok => String::new(),
            ExecOutcome::Error => "Execution failed.\n".to_string(),
            ExecOutcome::Timeout => format!("Execution timed out after {:.0} s.\n", self.wall_time),
            ExecOutcome::BlockedImport { module } => {
                format!("ImportError: import of '{module}' is blocked in this sandbox.\n")
            }
        };
        if !self.stdout.is_empty() {
            s.push_str(&format!("stdout:\n{}\n", self.stdout.trim_end()));
        }
        if !self.stderr.is_empty() {
            s.push_str(&format!("stderr:\n{}\n", self.stderr.trim_end()));
        }
        if s.is_empty() {
            s.push_str("(no output)");
        }
        s.trim_end().to_string()
    }
}

#[derive(Debug, Error)]
pub enum SandboxError {
    #[error("python interpreter {0:?} not found")]
    InterpreterNotFound(PathBuf),
    #[error("sandbox I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SandboxConfig {
    pub interpreter: PathBuf,
    pub timeout: Duration,
    /// Per stream; the rest is read and discarded.
    pub max_output_bytes: usize,
    pub memory_limit_bytes: u64,
    /// Concurrent executions.
    pub pool_size: usize,
    pub extra_blocked: Vec<String>,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self {
            interpreter: PathBuf::from("python3"),
            timeout: Duration::from_secs(300),
            max_output_bytes: 64 * 1024,
            memory_limit_bytes: 2 << 30,
            pool_size: 4,
            extra_blocked: Vec::new(),
        }
    }
}

#[derive(Debug)]
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

struct Permit<'a>(&'a Permits);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        self.0.cv.notify_one();
    }
}

/// Runs each script in a fresh interpreter process: empty environment,
/// throwaway working directory, own session, resource limits, an import
/// guard and no `open`.
#[derive(Debug, Clone)]
pub struct Sandbox {
    config: SandboxConfig,
    interpreter: PathBuf,
    runner: String,
    permits: Arc<Permits>,
}

fn find_in_path(program: &Path) -> Option<PathBuf> {
    if program.components().count() > 1 {
        return program.is_file().then(|| program.to_path_buf());
    }
    std::env::var_os("PATH")
        .into_iter()
        .flat_map(|p| std::env::split_paths(&p).collect::<Vec<_>>())
        .map(|dir| dir.join(program))
        .find(|p| p.is_file())
}

fn read_capped(mut reader: impl Read, cap: usize) -> String {
    let mut kept = Vec::new();
    let mut buf = [0u8; 8192];
    let mut truncated = false;
    loop {
        match reader.read(&mut buf) {
            Ok(0) | Err(_) => break,
            Ok(n) => {
                let room = cap.saturating_sub(kept.len());
                kept.extend_from_slice(&buf[..n.min(room)]);
                truncated |= n > room;
            }
        }
    }
    let mut s = String::from_utf8_lossy(&kept).into_owned();
    if truncated {
        s.push_str("\n[output truncated]");
    }
    s
}

impl Sandbox {
    pub fn new(config: SandboxConfig) -> Result<Self, SandboxError> {
        let interpreter = find_in_path(&config.interpreter)
            .ok_or_else(|| SandboxError::InterpreterNotFound(config.interpreter.clone()))?;
        let blocked: Vec<String> = BLOCKED_MODULES
            .iter()
            .chain(ESCAPE_MODULES)
            .map(|m| m.to_string())
            .chain(config.extra_blocked.iter().cloned())
            .map(|m| format!("{m:?}"))
            .collect();
        let runner = RUNNER.replace("@BLOCKED@", &format!("[{}]", blocked.join(", "))).replace("@SENTINEL@", SENTINEL);
        let permits = Arc::new(Permits { free: Mutex::new(config.pool_size.max(1)), cv: Condvar::new() });
        Ok(Self { config, interpreter, runner, permits })
    }

    pub fn config(&self) -> &SandboxConfig {
        &self.config
    }

    fn acquire(&self) -> Permit<'_> {
        let mut free = self.permits.free.lock().unwrap_or_else(|e| e.into_inner());
        while *free == 0 {
            free = self.permits.cv.wait(free).unwrap_or_else(|e| e.into_inner());
        }
        *free -= 1;
        Permit(&self.permits)
    }

    pub fn run(&self, code: &str) -> Result<ExecutionResult, SandboxError> {
        let _permit = self.acquire();
        let workdir = tempfile::tempdir()?;
        let mem = self.config.memory_limit_bytes as libc::rlim_t;
        let cpu = self.config.timeout.as_secs() as libc::rlim_t + 2;
        let mut cmd = Command::new(&self.interpreter);
        cmd.args(["-I", "-B", "-c", &self.runner])
            .env_clear()
            .env("LANG", "C.UTF-8")
            .env("HOME", workdir.path())
            .current_dir(workdir.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped());
        // SAFETY: only async-signal-safe libc calls between fork and exec.
        unsafe {
            cmd.pre_exec(move || {
                libc::setsid();
                let limit = |res, v: libc::rlim_t| {
                    let r = libc::rlimit { rlim_cur: v, rlim_max: v };
                    libc::setrlimit(res, &r);
                };
                limit(libc::RLIMIT_AS, mem);
                limit(libc::RLIMIT_CPU, cpu);
                limit(libc::RLIMIT_CORE, 0);
                limit(libc::RLIMIT_FSIZE, 0);
                if libc::unshare(libc::CLONE_NEWNET) != 0 {
                    libc::unshare(libc::CLONE_NEWUSER | libc::CLONE_NEWNET);
                }
                Ok(())
            });
        }
        let start = Instant::now();
        let mut child = cmd.spawn().map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => SandboxError::InterpreterNotFound(self.interpreter.clone()),
            _ => SandboxError::Io(e),
        })?;
        let pid = child.id() as libc::pid_t;
        let mut stdin = child.stdin.take().expect("stdin piped");
        let source = code.to_string();
        let writer = thread::spawn(move || {
            let _ = stdin.write_all(source.as_bytes());
        });
        let cap = self.config.max_output_bytes;
        let out = child.stdout.take().expect("stdout piped");
        let err = child.stderr.take().expect("stderr piped");
        let out = thread::spawn(move || read_capped(out, cap));
        let err = thread::spawn(move || read_capped(err, cap));

        let mut killed = false;
        let status = loop {
            if let Some(status) = child.try_wait()? {
                break status;
            }
            if start.elapsed() >= self.config.timeout {
                // SAFETY: signalling the child's own process group.
                unsafe {
                    libc::killpg(pid, libc::SIGKILL);
                }
                let _ = child.kill();
                killed = true;
                break child.wait()?;
            }
            thread::sleep(Duration::from_millis(5));
        };
        let wall_time = start.elapsed();
        let _ = writer.join();
        let stdout = out.join().unwrap_or_default();
        let mut stderr = err.join().unwrap_or_default();

        let mut blocked = None;
        if let Some(pos) = stderr.rfind(SENTINEL) {
            let module = stderr[pos + SENTINEL.len()..].lines().next().unwrap_or_default().trim().to_string();
            stderr.truncate(pos);
            stderr.truncate(stderr.trim_end().len());
            blocked = Some(module);
        }
        let outcome = if killed || wall_time >= self.config.timeout {
            ExecOutcome::Timeout
        } else if let Some(module) = blocked {
            ExecOutcome::BlockedImport { module }
        } else if status.success() {
            ExecOutcome::Ok
        } else {
            ExecOutcome::Error
        };
        Ok(ExecutionResult { stdout, stderr, outcome, wall_time: wall_time.as_secs_f64() })
    }
}
