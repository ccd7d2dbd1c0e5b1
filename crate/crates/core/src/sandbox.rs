//! Child-process execution of generated scripts.
//!
//! Isolation is limited to: working directory = node directory, an
//! environment built from an allowlist, a wall-clock timeout, and a kill of
//! the whole process group on timeout. Scripts that write to absolute paths
//! are not contained.

use std::fs::{self, File};
use std::io::{Read, Seek, SeekFrom};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitStatus, Stdio};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::manifest::{ArtifactManifest, MANIFEST_FILE};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(300);
pub const TAIL_BYTES: u64 = 16 * 1024;
/// Extra time allowed for the killed process tree to be reaped.
pub const KILL_GRACE: Duration = Duration::from_secs(2);
pub const DEFAULT_INTERPRETER: &str = "python3 {script}";

/// A synthesized tool: the code of round `round` for one node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolScript {
    pub node_id: String,
    pub round: u32,
    pub body: String,
    pub interpreter: String,
    #[serde(default)]
    pub references: Vec<String>,
}

impl ToolScript {
    pub fn file_name(&self) -> String {
        format!("tool_r{}", self.round)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionRecord {
    pub node_id: String,
    pub round: u32,
    pub exit_status: i32,
    pub stdout_tail: String,
    pub stderr_tail: String,
    pub traceback: Option<String>,
    #[serde(with = "duration_ms")]
    pub wall_time: Duration,
    pub manifest: Option<ArtifactManifest>,
    /// Why `manifest.json` existed but could not be parsed.
    #[serde(default)]
    pub manifest_error: Option<String>,
    pub timed_out: bool,
}

impl ExecutionRecord {
    pub fn succeeded(&self) -> bool {
        self.exit_status == 0 && !self.timed_out
    }
}

mod duration_ms {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SandboxConfig {
    /// Command template; `{script}` is replaced by the script file name,
    /// or the file name is appended when the placeholder is absent.
    pub interpreter: String,
    pub timeout: Duration,
    pub env_allowlist: Vec<String>,
    pub workdir: PathBuf,
    /// Workspace root exported as `WORKSPACE`.
    pub workspace_root: PathBuf,
    pub extra_env: Vec<(String, String)>,
}

impl SandboxConfig {
    pub fn new(workspace_root: &Path, workdir: &Path) -> Self {
        SandboxConfig {
            interpreter: DEFAULT_INTERPRETER.to_string(),
            timeout: DEFAULT_TIMEOUT,
            env_allowlist: default_allowlist(),
            workdir: workdir.to_path_buf(),
            workspace_root: workspace_root.to_path_buf(),
            extra_env: Vec::new(),
        }
    }

    pub fn with_interpreter(mut self, interpreter: impl Into<String>) -> Self {
        self.interpreter = interpreter.into();
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.extra_env.push((key.into(), value.into()));
        self
    }

    /// Same settings, different node directory.
    pub fn for_workdir(&self, workdir: &Path) -> Self {
        SandboxConfig {
            workdir: workdir.to_path_buf(),
            ..self.clone()
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.timeout.is_zero() {
            return Err(Error::SandboxMisconfigured("timeout must be positive".into()));
        }
        if !self.workdir.starts_with(&self.workspace_root) {
            return Err(Error::SandboxMisconfigured(format!(
                "workdir {} is outside the workspace {}",
                self.workdir.display(),
                self.workspace_root.display()
            )));
        }
        if !self.workdir.is_dir() {
            return Err(Error::SandboxMisconfigured(format!(
                "workdir {} does not exist",
                self.workdir.display()
            )));
        }
        Ok(())
    }
}

pub fn default_allowlist() -> Vec<String> {
    ["PATH", "HOME", "LANG", "LC_ALL", "TMPDIR", "PYTHONPATH", "SYSTEMROOT"]
        .into_iter()
        .map(String::from)
        .collect()
}

fn command_argv(interpreter: &str, script: &str) -> Vec<String> {
    let mut argv: Vec<String> = interpreter.split_whitespace().map(String::from).collect();
    if argv.iter().any(|a| a.contains("{script}")) {
        for a in &mut argv {
            *a = a.replace("{script}", script);
        }
    } else {
        argv.push(script.to_string());
    }
    argv
}

fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .unwrap_or_else(|| 128 + status.signal().unwrap_or(0))
}

fn read_tail(path: &Path) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let start = len.saturating_sub(TAIL_BYTES);
    if f.seek(SeekFrom::Start(start)).is_err() {
        return String::new();
    }
    let mut buf = Vec::new();
    let _ = f.read_to_end(&mut buf);
    String::from_utf8_lossy(&buf).into_owned()
}

/// Python-style traceback if present, else the last lines of stderr.
pub fn extract_traceback(stderr: &str) -> Option<String> {
    if let Some(pos) = stderr.rfind("Traceback (most recent call last):") {
        return Some(stderr[pos..].trim_end().to_string());
    }
    let lines: Vec<&str> = stderr.lines().filter(|l| !l.trim().is_empty()).collect();
    if lines.is_empty() {
        return None;
    }
    Some(lines[lines.len().saturating_sub(20)..].join("\n"))
}

/// Rewrites absolute node-directory and workspace paths (Python reports
/// the script path absolutely) so diagnostics do not depend on where the
/// workspace lives.
fn relativize(text: &str, cfg: &SandboxConfig) -> String {
    let mut out = text.to_string();
    for dir in [cfg.workdir.canonicalize().ok(), Some(cfg.workdir.clone())].into_iter().flatten() {
        out = out.replace(&format!("{}/", dir.display()), "");
    }
    for root in [cfg.workspace_root.canonicalize().ok(), Some(cfg.workspace_root.clone())].into_iter().flatten() {
        out = out.replace(&root.display().to_string(), "$WORKSPACE");
    }
    out
}

fn kill_group(pid: u32) {
    // SAFETY: plain syscall on a process group we created; failure (ESRCH)
    // just means the group already exited.
    unsafe {
        libc::kill(-(pid as libc::pid_t), libc::SIGKILL);
    }
}

/// Writes the script to `tool_r<round>` in the workdir and runs it.
///
/// Script failures (non-zero exit, timeout) are data in the returned
/// record; only a missing interpreter or unusable workdir is an error.
pub fn execute_script(script: &ToolScript, cfg: &SandboxConfig) -> Result<ExecutionRecord> {
    cfg.check()?;
    let file_name = script.file_name();
    let script_path = cfg.workdir.join(&file_name);
    fs::write(&script_path, &script.body).map_err(|e| Error::io(&script_path, e))?;
    let manifest_path = cfg.workdir.join(MANIFEST_FILE);
    if manifest_path.exists() {
        fs::remove_file(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    }

    let argv = command_argv(&cfg.interpreter, &file_name);
    let Some((program, args)) = argv.split_first() else {
        return Err(Error::SandboxMisconfigured("empty interpreter command".into()));
    };
    let stdout_path = cfg.workdir.join(format!("stdout_r{}.log", script.round));
    let stderr_path = cfg.workdir.join(format!("stderr_r{}.log", script.round));
    let stdout = File::create(&stdout_path).map_err(|e| Error::io(&stdout_path, e))?;
    let stderr = File::create(&stderr_path).map_err(|e| Error::io(&stderr_path, e))?;

    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(&cfg.workdir)
        .env_clear()
        .stdin(Stdio::null())
        .stdout(Stdio::from(stdout))
        .stderr(Stdio::from(stderr))
        .process_group(0);
    for key in &cfg.env_allowlist {
        if let Ok(v) = std::env::var(key) {
            cmd.env(key, v);
        }
    }
    cmd.env("WORKSPACE", &cfg.workspace_root)
        .env("GF_NODE_ID", &script.node_id);
    for (k, v) in &cfg.extra_env {
        cmd.env(k, v);
    }

    let started = Instant::now();
    let mut child = cmd.spawn().map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::SandboxMisconfigured(format!("interpreter `{program}` not found"))
        } else {
            Error::SandboxMisconfigured(format!("cannot start `{program}`: {e}"))
        }
    })?;
    let pid = child.id();
    let (status, timed_out) = match child
        .wait_timeout(cfg.timeout)
        .map_err(|e| Error::io(&cfg.workdir, e))?
    {
        Some(status) => {
            // reap any grandchildren left behind in the group
            kill_group(pid);
            (status, false)
        }
        None => {
            kill_group(pid);
            let status = child.wait().map_err(|e| Error::io(&cfg.workdir, e))?;
            (status, true)
        }
    };
    let wall_time = started.elapsed();

    let stdout_tail = read_tail(&stdout_path);
    let stderr_tail = read_tail(&stderr_path);
    let exit_status = exit_code(status);
    let traceback = if exit_status != 0 || timed_out {
        let mut tb = extract_traceback(&stderr_tail)
            .map(|t| relativize(&t, cfg))
            .unwrap_or_default();
        if timed_out {
            if !tb.is_empty() {
                tb.push('\n');
            }
            tb.push_str(&format!("killed after exceeding the {}s timeout", cfg.timeout.as_secs_f64()));
        }
        (!tb.is_empty()).then_some(tb).or_else(|| Some(format!("exit status {exit_status}")))
    } else {
        None
    };
    let (manifest, manifest_error) = if manifest_path.exists() {
        match ArtifactManifest::load(&manifest_path) {
            Ok(m) => (Some(m), None),
            Err(e) => (None, Some(e.to_string())),
        }
    } else {
        (None, None)
    };

    Ok(ExecutionRecord {
        node_id: script.node_id.clone(),
        round: script.round,
        exit_status,
        stdout_tail,
        stderr_tail,
        traceback,
        wall_time,
        manifest,
        manifest_error,
        timed_out,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(body: &str) -> ToolScript {
        ToolScript {
            node_id: "n1".into(),
            round: 1,
            body: body.into(),
            interpreter: "sh {script}".into(),
            references: vec![],
        }
    }

    fn cfg(root: &Path) -> SandboxConfig {
        let wd = root.join("nodes/n1");
        fs::create_dir_all(&wd).unwrap();
        SandboxConfig::new(root, &wd).with_interpreter("sh {script}")
    }

    #[test]
    fn captures_stdout_and_exit() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = execute_script(&sh("echo ok"), &cfg(tmp.path())).unwrap();
        assert_eq!(rec.exit_status, 0);
        assert_eq!(rec.stdout_tail.trim(), "ok");
        assert!(rec.traceback.is_none());
        assert!(tmp.path().join("nodes/n1/tool_r1").is_file());
    }

    #[test]
    fn nonzero_exit_is_data() {
        let tmp = tempfile::tempdir().unwrap();
        let rec = execute_script(&sh("echo boom >&2; exit 3"), &cfg(tmp.path())).unwrap();
        assert_eq!(rec.exit_status, 3);
        assert_eq!(rec.traceback.as_deref(), Some("boom"));
    }

    #[test]
    fn timeout_kills_process_tree() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path()).with_timeout(Duration::from_secs(1));
        let started = Instant::now();
        let rec = execute_script(&sh("sleep 30 & while true; do :; done"), &c).unwrap();
        assert!(rec.timed_out);
        assert_ne!(rec.exit_status, 0);
        assert!(started.elapsed() < Duration::from_secs(1) + KILL_GRACE);
        assert!(rec.wall_time <= c.timeout + KILL_GRACE);
    }

    #[test]
    fn manifest_is_parsed() {
        let tmp = tempfile::tempdir().unwrap();
        let body = r#"echo 1 > a.txt; echo 2 > b.txt
cat > manifest.json <<'EOF'
{"artifacts":[{"name":"a","path":"a.txt","kind":"table"},{"name":"b","path":"b.txt","kind":"table"}],"results":null}
EOF"#;
        let rec = execute_script(&sh(body), &cfg(tmp.path())).unwrap();
        assert_eq!(rec.manifest.unwrap().artifacts.len(), 2);
    }

    #[test]
    fn stale_manifest_is_removed_between_rounds() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path());
        fs::write(c.workdir.join(MANIFEST_FILE), r#"{"artifacts":[]}"#).unwrap();
        let rec = execute_script(&sh("exit 1"), &c).unwrap();
        assert!(rec.manifest.is_none());
    }

    #[test]
    fn missing_interpreter_is_misconfiguration() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path()).with_interpreter("no-such-interpreter-xyz {script}");
        assert!(matches!(execute_script(&sh("x"), &c), Err(Error::SandboxMisconfigured(_))));
    }

    #[test]
    fn workdir_must_be_inside_workspace() {
        let tmp = tempfile::tempdir().unwrap();
        let other = tempfile::tempdir().unwrap();
        let c = SandboxConfig::new(tmp.path(), other.path());
        assert!(matches!(execute_script(&sh("x"), &c), Err(Error::SandboxMisconfigured(_))));
    }

    #[test]
    fn environment_is_allowlisted() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path()).with_env("GF_EXTRA", "1");
        let rec = execute_script(&sh("env | sort"), &c).unwrap();
        assert!(rec.stdout_tail.contains("GF_NODE_ID=n1"));
        assert!(rec.stdout_tail.contains("GF_EXTRA=1"));
        assert!(rec.stdout_tail.contains(&format!("WORKSPACE={}", tmp.path().display())));
        assert!(!rec.stdout_tail.contains("CARGO_PKG_NAME"));
    }

    #[test]
    fn relative_writes_stay_in_workspace() {
        let tmp = tempfile::tempdir().unwrap();
        let c = cfg(tmp.path());
        execute_script(&sh("echo x > ../escaped.txt"), &c).unwrap();
        assert!(tmp.path().join("nodes/escaped.txt").exists());
    }

    #[test]
    fn python_traceback_extraction() {
        let err = "warning: x\nTraceback (most recent call last):\n  File \"tool_r1\", line 1\nValueError: bad\n";
        assert_eq!(
            extract_traceback(err).unwrap(),
            "Traceback (most recent call last):\n  File \"tool_r1\", line 1\nValueError: bad"
        );
        assert_eq!(extract_traceback(""), None);
    }

    #[test]
    fn interpreter_template() {
        assert_eq!(command_argv("python3 -u {script}", "tool_r2"), ["python3", "-u", "tool_r2"]);
        assert_eq!(command_argv("bash", "tool_r1"), ["bash", "tool_r1"]);
    }
}
