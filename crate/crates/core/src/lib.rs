//! Autonomous fuzz-driver synthesis for binary-only shared libraries.
//!
//! The pipeline enumerates a library's exported functions, recovers a rough
//! signature for each from its machine code, then has a tool-calling chat
//! model analyse the function and write a libFuzzer driver. Drivers are
//! compiled and smoke-run; failures go back to the model until a driver runs
//! nominally or the attempt budget is spent.

pub mod analysis;
pub mod config;
pub mod disasm;
pub mod elf;
pub mod forge;
pub mod ledger;
pub mod llm;
pub mod orchestrator;

pub use analysis::{ExclusionReason, ExportedFunction};
pub use config::{BackendKind, ConfigError, PipelineConfig};
pub use disasm::{Confidence, Disassembly, InferredSignature, TypeClass};
pub use elf::{load_binary, BinaryImage, ElfError};
pub use forge::{CompileResult, DriverSource, ExecResult, Verdict};
pub use ledger::{compute_report, render_report, CoverageReport, DriverAttempt, ReportFormat, RunLedger};
pub use llm::{ChatTurn, Role, SessionTranscript, ToolInvocation, ToolSpec};
pub use orchestrator::{run_pipeline, Budgets, FunctionSession, Phase, PhaseState, PipelineEnv, PipelineOutcome};
