//! Driver sources on disk, fuzzer-instrumented compiles and bounded smoke runs.

mod process;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use process::{run_bounded, truncation_marker, CapBuffer, Finished, Termination};

/// Symbol every generated driver must define.
pub const FUZZ_ENTRYPOINT: &str = "LLVMFuzzerTestOneInput";

pub const SOURCE_FILE: &str = "driver.cc";
pub const BINARY_FILE: &str = "driver.bin";
pub const COMPILE_LOG: &str = "compile.stderr";
pub const RUN_LOG: &str = "run.log";

pub const DEFAULT_COMPILE_TEMPLATE: &str =
    "clang++ -g -O1 {sanitize} {source} -o {output} {library_dir}/{library_name}";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ForgeError {
    #[error("no code found: the response has no {FUZZ_ENTRYPOINT} definition")]
    NoCodeFound,
    #[error("compiler not found: {0}")]
    CompilerNotFound(String),
    #[error("bad compile template: {0}")]
    BadTemplate(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

impl From<std::io::Error> for ForgeError {
    fn from(e: std::io::Error) -> Self {
        ForgeError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SourceOrigin {
    FencedBlock,
    RawBody,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DriverSource {
    pub function_name: String,
    pub attempt_index: u32,
    pub code: String,
    pub extracted_from: SourceOrigin,
    /// Relative to the run workspace.
    pub path: PathBuf,
}

fn is_cxx_tag(tag: &str) -> bool {
    let tag = tag.split_whitespace().next().unwrap_or("").to_ascii_lowercase();
    matches!(tag.as_str(), "" | "c" | "cc" | "cpp" | "c++" | "cxx" | "h" | "hpp")
}

/// Pulls driver code out of an assistant reply. Fenced blocks tagged as C or
/// C++ (or untagged) are concatenated in order; without fences the whole body
/// is taken as code.
pub fn extract_source(text: &str) -> Result<(String, SourceOrigin), ForgeError> {
    let mut blocks = Vec::new();
    let mut saw_fence = false;
    let mut current: Option<(bool, Vec<&str>)> = None;
    for line in text.lines() {
        let trimmed = line.trim_start();
        if let Some(rest) = trimmed.strip_prefix("```") {
            match current.take() {
                None => {
                    saw_fence = true;
                    current = Some((is_cxx_tag(rest), Vec::new()));
                }
                Some((keep, lines)) => {
                    if keep {
                        blocks.push(lines.join("\n"));
                    }
                }
            }
            continue;
        }
        if let Some((_, lines)) = current.as_mut() {
            lines.push(line);
        }
    }
    // an unterminated final fence still counts
    if let Some((true, lines)) = current {
        blocks.push(lines.join("\n"));
    }
    let (code, origin) = if saw_fence {
        (blocks.join("\n\n"), SourceOrigin::FencedBlock)
    } else {
        (text.trim().to_string(), SourceOrigin::RawBody)
    };
    if code.trim().is_empty() || !code.contains(FUZZ_ENTRYPOINT) {
        return Err(ForgeError::NoCodeFound);
    }
    let mut code = code;
    if !code.ends_with('\n') {
        code.push('\n');
    }
    Ok((code, origin))
}

/// Maps a symbol name to a directory-safe component.
pub fn safe_component(name: &str) -> String {
    let s: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.') { c } else { '_' })
        .collect();
    match s.as_str() {
        "" | "." | ".." => format!("_{s}"),
        _ => s,
    }
}

/// `<root>/<function>/<attempt>/...`
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn relative_attempt_dir(function: &str, attempt: u32) -> PathBuf {
        PathBuf::from(safe_component(function)).join(attempt.to_string())
    }

    pub fn attempt_dir(&self, function: &str, attempt: u32) -> PathBuf {
        self.root.join(Self::relative_attempt_dir(function, attempt))
    }

    /// Creates a fresh attempt directory (clearing leftovers from an
    /// interrupted run) and writes the source into it.
    pub fn write_source(
        &self,
        function: &str,
        attempt: u32,
        code: String,
        origin: SourceOrigin,
    ) -> Result<DriverSource, ForgeError> {
        let dir = self.attempt_dir(function, attempt);
        if dir.exists() {
            std::fs::remove_dir_all(&dir)?;
        }
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(SOURCE_FILE), &code)?;
        Ok(DriverSource {
            function_name: function.to_string(),
            attempt_index: attempt,
            code,
            extracted_from: origin,
            path: Self::relative_attempt_dir(function, attempt).join(SOURCE_FILE),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CompileConfig {
    /// Placeholders: `{source}`, `{output}`, `{library_dir}`, `{library_name}`,
    /// `{sanitize}` (expands to zero or more flags).
    pub template: String,
    pub fuzzer: bool,
    pub address_sanitizer: bool,
    #[serde(with = "secs", rename = "timeout_secs")]
    pub timeout: Duration,
    pub output_cap: usize,
}

impl Default for CompileConfig {
    fn default() -> Self {
        Self {
            template: DEFAULT_COMPILE_TEMPLATE.into(),
            fuzzer: true,
            address_sanitizer: true,
            timeout: Duration::from_secs(120),
            output_cap: 32 * 1024,
        }
    }
}

impl CompileConfig {
    pub fn sanitize_flags(&self) -> Vec<String> {
        let mut parts = Vec::new();
        if self.fuzzer {
            parts.push("fuzzer");
        }
        if self.address_sanitizer {
            parts.push("address");
        }
        if parts.is_empty() {
            Vec::new()
        } else {
            vec![format!("-fsanitize={}", parts.join(","))]
        }
    }

    /// The argv the template produces for a given library.
    pub fn render(&self, source: &str, output: &str, library: &Path) -> Result<Vec<String>, ForgeError> {
        let words = shell_words::split(&self.template).map_err(|e| ForgeError::BadTemplate(e.to_string()))?;
        let dir = library
            .parent()
            .map(|p| if p.as_os_str().is_empty() { Path::new(".") } else { p })
            .unwrap_or(Path::new("."));
        let name = library
            .file_name()
            .ok_or_else(|| ForgeError::BadTemplate(format!("library path {} has no file name", library.display())))?;
        let mut argv = Vec::new();
        for w in words {
            if w == "{sanitize}" {
                argv.extend(self.sanitize_flags());
                continue;
            }
            let w = w
                .replace("{source}", source)
                .replace("{output}", output)
                .replace("{library_dir}", &dir.to_string_lossy())
                .replace("{library_name}", &name.to_string_lossy())
                .replace("{sanitize}", &self.sanitize_flags().join(" "));
            argv.push(w);
        }
        if argv.is_empty() {
            return Err(ForgeError::BadTemplate("empty compile command".into()));
        }
        Ok(argv)
    }

    /// Human-readable command as run from inside an attempt directory.
    pub fn display_command(&self, library: &Path) -> Result<String, ForgeError> {
        Ok(shell_words::join(self.render(SOURCE_FILE, BINARY_FILE, library)?))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileResult {
    pub success: bool,
    pub stderr: String,
    pub artifact_path: Option<PathBuf>,
    pub duration: f64,
    #[serde(default)]
    pub timed_out: bool,
}

/// Compiles `<attempt_dir>/driver.cc` into `<attempt_dir>/driver.bin`, running
/// the compiler inside the attempt directory so diagnostics name the file
/// relatively. stderr is also written to `compile.stderr`.
pub fn compile(attempt_dir: &Path, library: &Path, cfg: &CompileConfig) -> Result<CompileResult, ForgeError> {
    let library = std::fs::canonicalize(library).unwrap_or_else(|_| library.to_path_buf());
    let argv = cfg.render(SOURCE_FILE, BINARY_FILE, &library)?;
    let artifact = attempt_dir.join(BINARY_FILE);
    let _ = std::fs::remove_file(&artifact);
    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..]).current_dir(attempt_dir);
    let finished = match run_bounded(cmd, cfg.timeout, cfg.output_cap, false) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(ForgeError::CompilerNotFound(argv[0].clone()))
        }
        Err(e) => return Err(e.into()),
    };
    let (success, stderr, timed_out) = match finished.termination {
        Termination::Deadline => (
            false,
            format!(
                "{}compilation timed out after {} s\n",
                finished.output,
                cfg.timeout.as_secs()
            ),
            true,
        ),
        Termination::Exited(0) => (true, finished.output, false),
        _ => (false, finished.output, false),
    };
    std::fs::write(attempt_dir.join(COMPILE_LOG), &stderr)?;
    let success = success && is_executable(&artifact);
    Ok(CompileResult {
        success,
        stderr,
        artifact_path: success.then_some(artifact),
        duration: finished.elapsed.as_secs_f64(),
        timed_out,
    })
}

fn is_executable(path: &Path) -> bool {
    use std::os::unix::fs::PermissionsExt;
    std::fs::metadata(path)
        .map(|m| m.is_file() && m.permissions().mode() & 0o111 != 0)
        .unwrap_or(false)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Nominal,
    EarlyExitFailure,
    Crash,
    SetupFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum ExitStatusInfo {
    Code(i32),
    Signal(i32),
    /// Still running when the window closed.
    Killed,
    /// Could not be started at all.
    NotStarted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecResult {
    pub verdict: Verdict,
    pub exit_status: ExitStatusInfo,
    pub captured_output: String,
    pub wall_time: f64,
    /// Crash input written by the fuzzer, relative to the attempt directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_artifact: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    #[serde(with = "secs", rename = "window_secs")]
    pub window: Duration,
    pub output_cap: usize,
    /// Put the target library's directory on the loader search path.
    pub inject_library_path: bool,
    pub extra_args: Vec<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            window: Duration::from_secs(10),
            output_cap: 32 * 1024,
            inject_library_path: true,
            extra_args: Vec::new(),
        }
    }
}

const LOADER_MARKERS: &[&str] = &[
    "error while loading shared libraries",
    "cannot open shared object file",
    "symbol lookup error",
];

const CRASH_MARKERS: &[&str] = &[
    "ERROR: AddressSanitizer",
    "ERROR: LeakSanitizer",
    "ERROR: UndefinedBehaviorSanitizer",
    "ERROR: libFuzzer",
    "deadly signal",
    "SUMMARY: AddressSanitizer",
];

const SETUP_CUTOFF: Duration = Duration::from_secs(1);

/// Verdict for a finished smoke run. Loader diagnostics and crash reports are
/// recognized before the early-exit timing rule, since a sanitizer crash on
/// the first input also ends well inside a second.
pub fn classify(termination: Termination, output: &str, elapsed: Duration) -> Verdict {
    match termination {
        Termination::Deadline => Verdict::Nominal,
        _ if LOADER_MARKERS.iter().any(|m| output.contains(m)) => Verdict::SetupFailure,
        Termination::Signaled(_) => Verdict::Crash,
        _ if CRASH_MARKERS.iter().any(|m| output.contains(m)) => Verdict::Crash,
        Termination::Exited(0) => Verdict::EarlyExitFailure,
        Termination::Exited(_) if elapsed < SETUP_CUTOFF => Verdict::SetupFailure,
        Termination::Exited(_) => Verdict::EarlyExitFailure,
    }
}

fn find_crash_artifact(dir: &Path) -> Option<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .ok()?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| ["crash-", "leak-", "timeout-", "oom-"].iter().any(|p| n.starts_with(p)))
        .collect();
    names.sort();
    names.into_iter().next()
}

/// Runs the driver for at most `cfg.window` from a fresh, empty corpus inside
/// `run_dir`; output goes to `run.log` there as well.
pub fn smoke_run(artifact: &Path, run_dir: &Path, library: &Path, cfg: &RunConfig) -> Result<ExecResult, ForgeError> {
    let corpus = run_dir.join("corpus");
    if corpus.exists() {
        std::fs::remove_dir_all(&corpus)?;
    }
    std::fs::create_dir_all(&corpus)?;
    let artifact = std::fs::canonicalize(artifact).unwrap_or_else(|_| artifact.to_path_buf());
    let mut cmd = Command::new(&artifact);
    cmd.current_dir(run_dir)
        .arg(format!("-artifact_prefix={}/", run_dir.display()))
        .arg(format!("-max_total_time={}", cfg.window.as_secs() + 2))
        .args(&cfg.extra_args)
        .arg("corpus");
    if cfg.inject_library_path {
        let lib_dir = std::fs::canonicalize(library)
            .unwrap_or_else(|_| library.to_path_buf())
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_default();
        let mut search = lib_dir.into_os_string();
        if let Some(existing) = std::env::var_os("LD_LIBRARY_PATH").filter(|v| !v.is_empty()) {
            search.push(":");
            search.push(existing);
        }
        cmd.env("LD_LIBRARY_PATH", search);
    } else {
        cmd.env_remove("LD_LIBRARY_PATH");
    }
    let result = match run_bounded(cmd, cfg.window, cfg.output_cap, true) {
        Ok(f) => {
            let verdict = classify(f.termination, &f.output, f.elapsed);
            let exit_status = match f.termination {
                Termination::Deadline => ExitStatusInfo::Killed,
                Termination::Exited(c) => ExitStatusInfo::Code(c),
                Termination::Signaled(s) => ExitStatusInfo::Signal(s),
            };
            ExecResult {
                verdict,
                exit_status,
                captured_output: f.output,
                wall_time: f.elapsed.as_secs_f64(),
                crash_artifact: if verdict == Verdict::Crash { find_crash_artifact(run_dir) } else { None },
            }
        }
        Err(e) => ExecResult {
            verdict: Verdict::SetupFailure,
            exit_status: ExitStatusInfo::NotStarted,
            captured_output: format!("failed to start {}: {e}\n", artifact.display()),
            wall_time: 0.0,
            crash_artifact: None,
        },
    };
    std::fs::write(run_dir.join(RUN_LOG), &result.captured_output)?;
    Ok(result)
}

pub(crate) mod secs {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_f64(d.as_secs_f64())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        let v = f64::deserialize(d)?;
        Duration::try_from_secs_f64(v).map_err(serde::de::Error::custom)
    }
}
