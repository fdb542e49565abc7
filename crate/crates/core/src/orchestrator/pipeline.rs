use std::collections::VecDeque;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, PoisonError};

use thiserror::Error;

use super::prompts::PromptSet;
use super::{run_function_session, ForgeSettings, FunctionSession, Interrupt, Phase, SessionDeps};
use crate::analysis::{classify_exports, list_exports, ClassifiedExport, ExportedFunction};
use crate::config::PipelineConfig;
use crate::disasm::{infer_signature, DisasmError, DisasmProvider};
use crate::elf::BinaryImage;
use crate::forge::{safe_component, RunConfig, Workspace};
use crate::ledger::{
    compute_report, render_report, CoverageReport, LedgerWriter, OutcomeRecord, ReportFormat, RunLedger,
    SessionStatus, LEDGER_FILE,
};
use crate::llm::{ChatBackend, Clock, LlmSession, RateLimiter, TranscriptFile};

pub const TRANSCRIPT_DIR: &str = "transcripts";
pub const REPORT_TEXT: &str = "report.txt";
pub const REPORT_JSON: &str = "report.json";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendSetupError {
    pub code: String,
    pub message: String,
}

impl BackendSetupError {
    pub fn new(code: &str, message: impl Into<String>) -> Self {
        Self {
            code: code.to_string(),
            message: message.into(),
        }
    }
}

/// Builds a fresh backend for one function's session.
pub type BackendFactory =
    Arc<dyn Fn(&ExportedFunction) -> Result<Box<dyn ChatBackend>, BackendSetupError> + Send + Sync>;

pub struct PipelineEnv {
    pub backend_factory: BackendFactory,
    pub provider: Arc<dyn DisasmProvider>,
    pub clock: Arc<dyn Clock>,
    /// Set from a signal handler; in-flight attempts finish, nothing new starts.
    pub cancel: Arc<AtomicBool>,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("fatal configuration error: {0}")]
    FatalConfig(String),
    #[error("i/o failure: {0}")]
    Io(String),
}

pub struct PipelineOutcome {
    pub ledger: RunLedger,
    pub report: CoverageReport,
    pub classified: Vec<ClassifiedExport>,
    /// Sorted by function name.
    pub sessions: Vec<FunctionSession>,
    /// Set when the run stopped early (backend down, fatal error, cancel).
    pub interrupt: Option<Interrupt>,
    pub ledger_path: PathBuf,
    pub transcript_dir: PathBuf,
}

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_BACKEND: i32 = 4;

impl PipelineOutcome {
    pub fn fully_covered(&self) -> bool {
        self.report.api_coverage_pct >= 100.0 && self.interrupt.is_none()
    }

    pub fn exit_code(&self) -> i32 {
        match &self.interrupt {
            Some(Interrupt::BackendUnreachable(_)) => EXIT_BACKEND,
            Some(Interrupt::Fatal(_)) => EXIT_CONFIG,
            Some(Interrupt::Cancelled) => EXIT_PARTIAL,
            None if self.fully_covered() => EXIT_OK,
            None => EXIT_PARTIAL,
        }
    }
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        EXIT_CONFIG
    }
}

/// Verifies that the compile template's program can be found.
pub fn check_compiler(template: &str) -> Result<(), PipelineError> {
    let words = shell_words::split(template).map_err(|e| PipelineError::FatalConfig(format!("compile template: {e}")))?;
    let prog = words
        .first()
        .ok_or_else(|| PipelineError::FatalConfig("empty compile template".into()))?;
    let found = if prog.contains('/') {
        Path::new(prog).is_file()
    } else {
        std::env::var_os("PATH")
            .map(|paths| std::env::split_paths(&paths).any(|d| d.join(prog).is_file()))
            .unwrap_or(false)
    };
    if found {
        Ok(())
    } else {
        Err(PipelineError::FatalConfig(format!("compiler {prog:?} not found")))
    }
}

fn run_id() -> String {
    format!("{}-{}", chrono::Utc::now().format("%Y%m%dT%H%M%S%.3fZ"), std::process::id())
}

struct Shared<'a> {
    queue: Mutex<VecDeque<&'a ClassifiedExport>>,
    writer: Mutex<LedgerWriter>,
    sessions: Mutex<Vec<FunctionSession>>,
    interrupt: Mutex<Option<Interrupt>>,
    abort: AtomicBool,
}

fn lock<T>(m: &Mutex<T>) -> std::sync::MutexGuard<'_, T> {
    m.lock().unwrap_or_else(PoisonError::into_inner)
}

/// Classifies the exports of `image`, runs a session for each fuzzable one
/// and returns the resulting ledger. Everything is written under the
/// configured workspace: `run.ldjson`, `report.txt`, `report.json`,
/// `transcripts/<function>.json` and `<function>/<attempt>/` artifacts.
pub fn run_pipeline(
    image: &BinaryImage,
    cfg: &PipelineConfig,
    env: &PipelineEnv,
) -> Result<PipelineOutcome, PipelineError> {
    cfg.validate_settings().map_err(|e| PipelineError::FatalConfig(e.to_string()))?;
    check_compiler(&cfg.compiler.template)?;
    let prompts = PromptSet::load(cfg.prompt_dir.as_deref()).map_err(|e| PipelineError::FatalConfig(e.to_string()))?;

    let provider = env.provider.as_ref();
    let classified = classify_exports(list_exports(image), &cfg.denylist(), |f| infer_signature(provider, image, f));
    if let Some(c) = classified.iter().find(|c| {
        c.provider_error
            .as_deref()
            .is_some_and(|e| e.starts_with(&DisasmError::AdapterUnavailable(String::new()).to_string()))
    }) {
        return Err(PipelineError::FatalConfig(c.provider_error.clone().unwrap_or_default()));
    }
    let mut fuzzable: Vec<&ClassifiedExport> = classified.iter().filter(|c| c.function.fuzzable).collect();
    if let Some(n) = cfg.max_functions {
        fuzzable.truncate(n);
    }

    let io = |e: std::io::Error| PipelineError::Io(e.to_string());
    std::fs::create_dir_all(&cfg.workspace).map_err(io)?;
    let workspace = std::fs::canonicalize(&cfg.workspace).map_err(io)?;
    let transcript_dir = workspace.join(TRANSCRIPT_DIR);
    std::fs::create_dir_all(&transcript_dir).map_err(io)?;
    let library = std::fs::canonicalize(&image.path).unwrap_or_else(|_| image.path.clone());

    let ledger = RunLedger::new(
        image.file_name(),
        run_id(),
        fuzzable.iter().map(|c| c.function.name.clone()),
        cfg.snapshot(),
    );
    let ledger_path = workspace.join(LEDGER_FILE);
    let writer = LedgerWriter::create(&ledger_path, ledger).map_err(|e| PipelineError::Io(e.to_string()))?;

    let forge = ForgeSettings {
        workspace: Workspace::new(&workspace),
        library,
        compile: cfg.compiler.clone(),
        run: RunConfig {
            window: cfg.budgets.smoke_run,
            ..RunConfig::default()
        },
    };
    let limiter = Arc::new(RateLimiter::new(cfg.budgets.rate_budget, env.clock.clone()));
    let shared = Shared {
        queue: Mutex::new(fuzzable.iter().copied().collect()),
        writer: Mutex::new(writer),
        sessions: Mutex::new(Vec::new()),
        interrupt: Mutex::new(None),
        abort: AtomicBool::new(false),
    };
    let deps = SessionDeps {
        image,
        provider,
        prompts: &prompts,
        forge: &forge,
        budgets: cfg.budgets,
        cancel: Some(env.cancel.as_ref()),
    };

    let workers = cfg.parallelism.min(fuzzable.len()).max(1);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| worker(&shared, &deps, env, &limiter, cfg, &transcript_dir));
        }
    });

    let mut interrupt = shared.interrupt.into_inner().unwrap_or_else(PoisonError::into_inner);
    if interrupt.is_none() && env.cancel.load(Ordering::SeqCst) {
        interrupt = Some(Interrupt::Cancelled);
    }
    let ledger = shared.writer.into_inner().unwrap_or_else(PoisonError::into_inner).into_ledger();
    let report = compute_report(&ledger);
    std::fs::write(workspace.join(REPORT_TEXT), render_report(&report, ReportFormat::TableText)).map_err(io)?;
    std::fs::write(workspace.join(REPORT_JSON), render_report(&report, ReportFormat::Json)).map_err(io)?;
    let mut sessions = shared.sessions.into_inner().unwrap_or_else(PoisonError::into_inner);
    sessions.sort_by(|a, b| a.function.name.cmp(&b.function.name));
    Ok(PipelineOutcome {
        ledger,
        report,
        classified,
        sessions,
        interrupt,
        ledger_path,
        transcript_dir,
    })
}

fn worker(
    shared: &Shared<'_>,
    deps: &SessionDeps<'_>,
    env: &PipelineEnv,
    limiter: &Arc<RateLimiter>,
    cfg: &PipelineConfig,
    transcript_dir: &Path,
) {
    loop {
        if shared.abort.load(Ordering::SeqCst) || env.cancel.load(Ordering::SeqCst) {
            return;
        }
        let Some(item) = lock(&shared.queue).pop_front() else {
            return;
        };
        let function = &item.function;
        let signature = item.signature.as_ref().expect("fuzzable exports carry a signature");

        let backend = match (env.backend_factory)(function) {
            Ok(b) => b,
            Err(e) => {
                let rec = OutcomeRecord {
                    function_name: function.name.clone(),
                    status: SessionStatus::Failed,
                    reason: Some(format!("{}: {}", e.code, e.message)),
                    analysis_turns_used: 0,
                };
                if let Err(e) = lock(&shared.writer).record_outcome(rec) {
                    stop(shared, Interrupt::Fatal(e.to_string()));
                }
                continue;
            }
        };
        let mut llm = LlmSession::new(backend, limiter.clone()).with_context_ceiling(cfg.context_ceiling);
        let mut on_attempt =
            |a: &crate::ledger::DriverAttempt| lock(&shared.writer).record_attempt(a.clone()).map_err(|e| e.to_string());
        let session = run_function_session(function, signature, &mut llm, deps, &mut on_attempt);

        let file = TranscriptFile {
            generation_start: session.generation_start,
            ..TranscriptFile::from(&session.transcript)
        };
        let path = transcript_dir.join(format!("{}.json", safe_component(&function.name)));
        if let Err(e) = file.write(&path) {
            stop(shared, Interrupt::Fatal(format!("writing {}: {e}", path.display())));
        }
        if session.state.is_terminal() {
            let rec = OutcomeRecord {
                function_name: function.name.clone(),
                status: if session.state.phase == Phase::Done { SessionStatus::Done } else { SessionStatus::Failed },
                reason: session.failure_reason.clone(),
                analysis_turns_used: session.state.analysis_turns_used,
            };
            if let Err(e) = lock(&shared.writer).record_outcome(rec) {
                stop(shared, Interrupt::Fatal(e.to_string()));
            }
        }
        if let Some(i) = &session.interrupt {
            stop(shared, i.clone());
        }
        lock(&shared.sessions).push(session);
    }
}

fn stop(shared: &Shared<'_>, interrupt: Interrupt) {
    shared.abort.store(true, Ordering::SeqCst);
    lock(&shared.interrupt).get_or_insert(interrupt);
}
