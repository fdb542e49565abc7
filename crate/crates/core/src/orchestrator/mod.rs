//! Per-function phase machine (analysis, then generation with repair) and
//! the pipeline that runs it over every fuzzable export.

mod pipeline;
pub mod prompts;
pub mod tools;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use chrono::Utc;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ExportedFunction;
use crate::disasm::{DisasmProvider, InferredSignature};
use crate::elf::BinaryImage;
use crate::forge::{
    compile, extract_source, smoke_run, CompileConfig, CompileResult, DriverSource, ExecResult,
    ExitStatusInfo, ForgeError, RunConfig, Verdict, Workspace, FUZZ_ENTRYPOINT,
};
use crate::ledger::{CompileSummary, DriverAttempt, ExecSummary};
use crate::llm::{ChatTurn, LlmError, LlmSession, Role, SessionStats, SessionTranscript, TranscriptError};

pub use pipeline::{
    check_compiler, run_pipeline, BackendFactory, BackendSetupError, PipelineEnv, PipelineError,
    PipelineOutcome, EXIT_BACKEND, EXIT_CONFIG, EXIT_INPUT, EXIT_OK, EXIT_PARTIAL, REPORT_JSON, REPORT_TEXT, TRANSCRIPT_DIR,
};
use prompts::{PromptError, PromptSet, TemplateId};
use tools::{analysis_tools, is_analysis_tool, refusal_text, ToolContext, PHASE_VIOLATION};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Budgets {
    pub max_analysis_turns: u32,
    pub max_generation_attempts: u32,
    #[serde(with = "crate::forge::secs", rename = "smoke_run_seconds")]
    pub smoke_run: Duration,
    /// Requests per minute across all sessions.
    pub rate_budget: u32,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            max_analysis_turns: 6,
            max_generation_attempts: 10,
            smoke_run: Duration::from_secs(10),
            rate_budget: 10,
        }
    }
}

impl Budgets {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_analysis_turns == 0 {
            return Err("max_analysis_turns must be positive".into());
        }
        if self.max_generation_attempts == 0 {
            return Err("max_generation_attempts must be positive".into());
        }
        if self.smoke_run.is_zero() {
            return Err("smoke_run_seconds must be positive".into());
        }
        if self.rate_budget == 0 {
            return Err("rate_budget must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Phase {
    Analysis,
    Generation,
    Done,
    Failed,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("illegal phase transition {from:?} -> {to:?}")]
pub struct PhaseError {
    pub from: Phase,
    pub to: Phase,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhaseState {
    pub phase: Phase,
    pub analysis_turns_used: u32,
    pub generation_attempts_used: u32,
    pub history: Vec<Phase>,
}

impl Default for PhaseState {
    fn default() -> Self {
        Self {
            phase: Phase::Analysis,
            analysis_turns_used: 0,
            generation_attempts_used: 0,
            history: vec![Phase::Analysis],
        }
    }
}

impl PhaseState {
    /// Only ANALYSIS -> GENERATION -> (DONE | FAILED).
    pub fn advance(&mut self, to: Phase) -> Result<(), PhaseError> {
        let ok = matches!(
            (self.phase, to),
            (Phase::Analysis, Phase::Generation) | (Phase::Generation, Phase::Done) | (Phase::Generation, Phase::Failed)
        );
        if !ok {
            return Err(PhaseError { from: self.phase, to });
        }
        self.phase = to;
        self.history.push(to);
        Ok(())
    }

    /// Ends the session as FAILED from any non-terminal phase.
    fn fail(&mut self) {
        if self.phase == Phase::Analysis {
            self.advance(Phase::Generation).expect("analysis -> generation");
        }
        if self.phase == Phase::Generation {
            self.advance(Phase::Failed).expect("generation -> failed");
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.phase, Phase::Done | Phase::Failed)
    }
}

/// One generation round-trip with everything the forge produced for it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttemptOutcome {
    pub attempt: DriverAttempt,
    pub source: Option<DriverSource>,
    /// Exactly the text shown to the model in the repair prompt.
    pub compile_stderr: String,
    pub exec: Option<ExecResult>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolEvent {
    pub call_id: String,
    pub tool_name: String,
    pub phase: Phase,
    pub satisfied: bool,
}

/// Why a session stopped before reaching a verdict of its own.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Interrupt {
    BackendUnreachable(String),
    Fatal(String),
    Cancelled,
}

#[derive(Debug, Clone)]
pub struct FunctionSession {
    pub function: ExportedFunction,
    pub signature: InferredSignature,
    pub transcript: SessionTranscript,
    pub state: PhaseState,
    pub attempts: Vec<AttemptOutcome>,
    /// Transcript index of the first turn after analysis ended.
    pub generation_start: Option<usize>,
    pub tool_events: Vec<ToolEvent>,
    pub failure_reason: Option<String>,
    pub interrupt: Option<Interrupt>,
    pub stats: SessionStats,
}

impl FunctionSession {
    pub fn is_done(&self) -> bool {
        self.state.phase == Phase::Done
    }
}

/// Forge inputs shared by every session of a run.
#[derive(Debug, Clone)]
pub struct ForgeSettings {
    pub workspace: Workspace,
    pub library: PathBuf,
    pub compile: CompileConfig,
    pub run: RunConfig,
}

pub struct SessionDeps<'a> {
    pub image: &'a BinaryImage,
    pub provider: &'a dyn DisasmProvider,
    pub prompts: &'a PromptSet,
    pub forge: &'a ForgeSettings,
    pub budgets: Budgets,
    pub cancel: Option<&'a AtomicBool>,
}

/// Reason codes stored with FAILED outcomes.
pub fn failure_code(e: &LlmError) -> String {
    match e {
        LlmError::BackendUnreachable(m) => format!("BACKEND_UNREACHABLE: {m}"),
        LlmError::RateLimitedExhausted { attempts } => format!("RATE_LIMITED_EXHAUSTED: {attempts} attempts"),
        LlmError::MalformedResponse(m) => format!("MALFORMED_RESPONSE: {m}"),
        LlmError::NoRuleMatched(m) => format!("NO_RULE_MATCHED: {m}"),
        LlmError::TranscriptExhausted => "TRANSCRIPT_EXHAUSTED".into(),
    }
}

fn exit_text(s: ExitStatusInfo) -> String {
    match s {
        ExitStatusInfo::Code(c) => format!("exit status {c}"),
        ExitStatusInfo::Signal(s) => format!("signal {s}"),
        ExitStatusInfo::Killed => "still running at the deadline".into(),
        ExitStatusInfo::NotStarted => "could not be started".into(),
    }
}

fn verdict_text(v: Verdict) -> &'static str {
    match v {
        Verdict::Nominal => "NOMINAL",
        Verdict::EarlyExitFailure => "EARLY_EXIT_FAILURE",
        Verdict::Crash => "CRASH",
        Verdict::SetupFailure => "SETUP_FAILURE",
    }
}

fn window_text(d: Duration) -> String {
    let s = d.as_secs_f64();
    if s.fract() == 0.0 {
        format!("{s:.0}")
    } else {
        format!("{s}")
    }
}

struct Runner<'a, 'b> {
    deps: &'a SessionDeps<'b>,
    llm: &'a mut LlmSession,
    on_attempt: &'a mut dyn FnMut(&DriverAttempt) -> Result<(), String>,
    session: FunctionSession,
    context: BTreeMap<String, String>,
}

enum Stop {
    Failed(String),
    Interrupted(Interrupt, Option<String>),
}

impl Runner<'_, '_> {
    fn cancelled(&self) -> bool {
        self.deps.cancel.is_some_and(|c| c.load(Ordering::SeqCst))
    }

    fn render(&self, id: TemplateId, extra: &[(&str, String)]) -> Result<String, Stop> {
        let mut ctx = self.context.clone();
        for (k, v) in extra {
            ctx.insert(k.to_string(), v.clone());
        }
        self.deps.prompts.render(id, &ctx).map_err(|e: PromptError| {
            Stop::Interrupted(Interrupt::Fatal(e.to_string()), Some(format!("FATAL_CONFIG: {e}")))
        })
    }

    fn push(&mut self, turn: ChatTurn) -> Result<(), Stop> {
        self.session
            .transcript
            .push(turn)
            .map_err(|e: TranscriptError| Stop::Failed(format!("MALFORMED_RESPONSE: {e}")))
    }

    fn send(&mut self, tools: &[crate::llm::ToolSpec]) -> Result<ChatTurn, Stop> {
        if self.cancelled() {
            return Err(Stop::Interrupted(Interrupt::Cancelled, None));
        }
        let result = self.llm.send(&self.session.transcript, tools);
        self.session.stats = self.llm.stats();
        result.map_err(|e| match e {
            LlmError::BackendUnreachable(ref m) => {
                Stop::Interrupted(Interrupt::BackendUnreachable(m.clone()), Some(failure_code(&e)))
            }
            other => Stop::Failed(failure_code(&other)),
        })
    }

    fn analysis(&mut self) -> Result<(), Stop> {
        let prompt = self.render(TemplateId::Analysis, &[])?;
        self.push(ChatTurn::user(prompt))?;
        let tools = analysis_tools();
        while self.session.state.analysis_turns_used < self.deps.budgets.max_analysis_turns {
            let reply = self.send(&tools)?;
            self.session.state.analysis_turns_used += 1;
            let calls = reply.tool_calls.clone();
            self.push(reply)?;
            if calls.is_empty() {
                break;
            }
            let ctx = ToolContext {
                image: self.deps.image,
                provider: self.deps.provider,
                function: &self.session.function,
                signature: &self.session.signature,
            };
            let results: Vec<(String, String, bool)> = calls
                .iter()
                .map(|c| (c.id.clone(), ctx.satisfy(c), is_analysis_tool(&c.tool_name)))
                .collect();
            for ((id, text, known), call) in results.into_iter().zip(&calls) {
                self.session.tool_events.push(ToolEvent {
                    call_id: id.clone(),
                    tool_name: call.tool_name.clone(),
                    phase: Phase::Analysis,
                    satisfied: known,
                });
                self.push(ChatTurn::tool_result(id, text))?;
            }
        }
        Ok(())
    }

    fn forge_attempt(&mut self, index: u32, content: &str) -> Result<AttemptOutcome, Stop> {
        let fatal = |e: ForgeError| {
            let code = match e {
                ForgeError::CompilerNotFound(_) | ForgeError::BadTemplate(_) => "FATAL_CONFIG",
                _ => "IO_FAILURE",
            };
            Stop::Interrupted(Interrupt::Fatal(e.to_string()), Some(format!("{code}: {e}")))
        };
        let forge = self.deps.forge;
        let name = self.session.function.name.clone();
        let (source, compile_result, exec) = match extract_source(content) {
            Err(_) => {
                let stderr = format!(
                    "no code found: the reply contains no definition of {FUZZ_ENTRYPOINT}\n"
                );
                let result = CompileResult {
                    success: false,
                    stderr,
                    artifact_path: None,
                    duration: 0.0,
                    timed_out: false,
                };
                (None, result, None)
            }
            Ok((code, origin)) => {
                let source = forge.workspace.write_source(&name, index, code, origin).map_err(fatal)?;
                let dir = forge.workspace.attempt_dir(&name, index);
                let result = compile(&dir, &forge.library, &forge.compile).map_err(fatal)?;
                let exec = match &result.artifact_path {
                    Some(bin) if result.success => Some(smoke_run(bin, &dir, &forge.library, &forge.run).map_err(fatal)?),
                    _ => None,
                };
                (Some(source), result, exec)
            }
        };
        let attempt = DriverAttempt {
            function_name: name,
            attempt_index: index,
            source_path: source.as_ref().map(|s| s.path.clone()),
            compile: CompileSummary::from(&compile_result),
            exec: exec.as_ref().map(ExecSummary::from),
            timestamp: Utc::now(),
        };
        (self.on_attempt)(&attempt).map_err(|e| {
            Stop::Interrupted(Interrupt::Fatal(e.clone()), Some(format!("IO_FAILURE: {e}")))
        })?;
        Ok(AttemptOutcome {
            attempt,
            source,
            compile_stderr: compile_result.stderr,
            exec,
        })
    }

    fn repair_prompt(&self, outcome: &AttemptOutcome) -> Result<String, Stop> {
        let attempt = outcome.attempt.attempt_index.to_string();
        match &outcome.exec {
            None => self.render(
                TemplateId::CompileRepair,
                &[("attempt", attempt), ("stderr", outcome.compile_stderr.clone())],
            ),
            Some(exec) => self.render(
                TemplateId::RuntimeRepair,
                &[
                    ("attempt", attempt),
                    ("verdict", verdict_text(exec.verdict).into()),
                    ("exit_status", exit_text(exec.exit_status)),
                    ("output", exec.captured_output.clone()),
                ],
            ),
        }
    }

    fn generation(&mut self) -> Result<(), Stop> {
        self.session.state.advance(Phase::Generation).expect("analysis precedes generation");
        self.session.generation_start = Some(self.session.transcript.len());
        let prompt = self.render(TemplateId::Generation, &[])?;
        self.push(ChatTurn::user(prompt))?;
        let max = self.deps.budgets.max_generation_attempts;
        for index in 1..=max {
            // no tools are offered once generation has started
            let reply = self.send(&[])?;
            self.session.state.generation_attempts_used += 1;
            let calls = reply.tool_calls.clone();
            let content = reply.content.clone();
            self.push(reply)?;
            for call in &calls {
                self.session.tool_events.push(ToolEvent {
                    call_id: call.id.clone(),
                    tool_name: call.tool_name.clone(),
                    phase: Phase::Generation,
                    satisfied: false,
                });
                self.push(ChatTurn::tool_result(call.id.clone(), refusal_text(call)))?;
            }
            let outcome = self.forge_attempt(index, &content)?;
            let nominal = outcome.attempt.is_nominal();
            let repair = if nominal || index == max { None } else { Some(self.repair_prompt(&outcome)?) };
            self.session.attempts.push(outcome);
            if nominal {
                self.session.state.advance(Phase::Done).expect("generation -> done");
                return Ok(());
            }
            if let Some(text) = repair {
                self.push(ChatTurn::user(text))?;
            }
        }
        Err(Stop::Failed(format!("BUDGET_EXHAUSTED: {max} generation attempts without a nominal run")))
    }
}

/// Drives one function from analysis to DONE or FAILED. `on_attempt` is
/// called after every attempt (the pipeline appends it to the ledger there).
pub fn run_function_session(
    function: &ExportedFunction,
    signature: &InferredSignature,
    llm: &mut LlmSession,
    deps: &SessionDeps<'_>,
    on_attempt: &mut dyn FnMut(&DriverAttempt) -> Result<(), String>,
) -> FunctionSession {
    let compile_cmd = deps
        .forge
        .compile
        .display_command(&deps.forge.library)
        .unwrap_or_else(|e| format!("<{e}>"));
    let library_name = deps.image.file_name();
    let context: BTreeMap<String, String> = [
        ("library_name", library_name),
        ("function_name", function.name.clone()),
        ("signature", signature.c_declaration()),
        ("compile_cmd", compile_cmd),
        ("max_attempts", deps.budgets.max_generation_attempts.to_string()),
        ("window", window_text(deps.forge.run.window)),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect();

    let system = deps.prompts.render(TemplateId::System, &context);
    let transcript_start = system
        .as_ref()
        .map(|s| ChatTurn::system(s.clone()))
        .unwrap_or_else(|e| ChatTurn::system(format!("<{e}>")));
    let transcript = SessionTranscript::new(llm.backend_id(), transcript_start).expect("system turn first");
    let mut runner = Runner {
        deps,
        llm,
        on_attempt,
        session: FunctionSession {
            function: function.clone(),
            signature: signature.clone(),
            transcript,
            state: PhaseState::default(),
            attempts: Vec::new(),
            generation_start: None,
            tool_events: Vec::new(),
            failure_reason: None,
            interrupt: None,
            stats: SessionStats::default(),
        },
        context,
    };
    let result = match system {
        Err(e) => Err(Stop::Interrupted(Interrupt::Fatal(e.to_string()), Some(format!("FATAL_CONFIG: {e}")))),
        Ok(_) => runner.analysis().and_then(|_| runner.generation()),
    };
    let mut session = runner.session;
    match result {
        Ok(()) => {}
        Err(Stop::Failed(reason)) => {
            session.state.fail();
            session.failure_reason = Some(reason);
        }
        Err(Stop::Interrupted(interrupt, reason)) => {
            if let Some(reason) = reason {
                session.state.fail();
                session.failure_reason = Some(reason);
            }
            session.interrupt = Some(interrupt);
        }
    }
    session
}

/// Analysis tool results satisfied at or after `generation_start`. Empty for
/// every transcript this crate produces.
pub fn satisfied_analysis_calls_after(turns: &[ChatTurn], generation_start: usize) -> Vec<String> {
    let mut violations = Vec::new();
    let mut last_calls: &[crate::llm::ToolInvocation] = &[];
    for (i, turn) in turns.iter().enumerate() {
        match turn.role {
            Role::Assistant => last_calls = &turn.tool_calls,
            Role::ToolResult if i >= generation_start => {
                let call = last_calls.iter().find(|c| Some(&c.id) == turn.tool_call_id.as_ref());
                if let Some(call) = call {
                    if is_analysis_tool(&call.tool_name) && !turn.content.starts_with(PHASE_VIOLATION) {
                        violations.push(format!("turn {i}: {} ({})", call.tool_name, call.id));
                    }
                }
            }
            _ => {}
        }
    }
    violations
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn legal_transitions() {
        let mut s = PhaseState::default();
        assert!(s.advance(Phase::Done).is_err());
        s.advance(Phase::Generation).unwrap();
        assert!(s.advance(Phase::Analysis).is_err());
        s.advance(Phase::Done).unwrap();
        assert!(s.advance(Phase::Failed).is_err());
        assert_eq!(s.history, [Phase::Analysis, Phase::Generation, Phase::Done]);
    }

    #[test]
    fn failing_from_analysis_passes_through_generation() {
        let mut s = PhaseState::default();
        s.fail();
        assert_eq!(s.history, [Phase::Analysis, Phase::Generation, Phase::Failed]);
    }

    #[test]
    fn budget_defaults() {
        let b = Budgets::default();
        assert_eq!((b.max_analysis_turns, b.max_generation_attempts, b.rate_budget), (6, 10, 10));
        assert_eq!(b.smoke_run, Duration::from_secs(10));
        assert!(b.validate().is_ok());
        assert!(Budgets { max_generation_attempts: 0, ..b }.validate().is_err());
    }

    proptest! {
        #[test]
        fn history_is_always_a_legal_prefix(steps in proptest::collection::vec(0u8..4, 0..10)) {
            let mut s = PhaseState::default();
            for step in steps {
                let to = [Phase::Analysis, Phase::Generation, Phase::Done, Phase::Failed][step as usize];
                let _ = s.advance(to);
            }
            let done = [Phase::Analysis, Phase::Generation, Phase::Done];
            let failed = [Phase::Analysis, Phase::Generation, Phase::Failed];
            prop_assert!(done.starts_with(&s.history) || failed.starts_with(&s.history));
        }
    }
}
