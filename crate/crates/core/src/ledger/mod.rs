//! Append-only per-run record of attempts and outcomes (`run.ldjson`).
//!
//! Each line is one JSON object tagged by `"record"`: a single `header`
//! first, then any number of `attempt` and `outcome` records in write order.
//! A torn final line (no trailing newline, unparsable) is ignored on load.

mod report;

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::forge::{CompileResult, ExecResult, ExitStatusInfo, Verdict};

pub use report::{compute_report, render_report, render_reports, ratio_half_up, total_report, CoverageReport, ReportFormat};

pub const LEDGER_FILE: &str = "run.ldjson";
pub const LEDGER_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("unknown function {0:?}")]
    UnknownFunction(String),
    #[error("attempt {index} for {function} does not follow attempt {last}")]
    OutOfOrder { function: String, index: u32, last: u32 },
    #[error("malformed ledger at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("i/o failure: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompileSummary {
    pub success: bool,
    pub duration: f64,
    #[serde(default)]
    pub timed_out: bool,
    pub stderr_bytes: usize,
}

impl From<&CompileResult> for CompileSummary {
    fn from(c: &CompileResult) -> Self {
        Self {
            success: c.success,
            duration: c.duration,
            timed_out: c.timed_out,
            stderr_bytes: c.stderr.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecSummary {
    pub verdict: Verdict,
    pub exit_status: ExitStatusInfo,
    pub wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crash_artifact: Option<String>,
}

impl From<&ExecResult> for ExecSummary {
    fn from(e: &ExecResult) -> Self {
        Self {
            verdict: e.verdict,
            exit_status: e.exit_status,
            wall_time: e.wall_time,
            crash_artifact: e.crash_artifact.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriverAttempt {
    pub function_name: String,
    pub attempt_index: u32,
    /// Workspace-relative; absent when the reply held no usable code.
    pub source_path: Option<PathBuf>,
    pub compile: CompileSummary,
    pub exec: Option<ExecSummary>,
    pub timestamp: DateTime<Utc>,
}

impl DriverAttempt {
    pub fn is_nominal(&self) -> bool {
        self.exec.as_ref().is_some_and(|e| e.verdict == Verdict::Nominal)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SessionStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FunctionOutcome {
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default)]
    pub analysis_turns_used: u32,
    pub attempts: Vec<DriverAttempt>,
}

impl Default for FunctionOutcome {
    fn default() -> Self {
        Self {
            status: SessionStatus::Pending,
            reason: None,
            analysis_turns_used: 0,
            attempts: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeRecord {
    pub function_name: String,
    pub status: SessionStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    pub analysis_turns_used: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeaderRecord {
    pub schema_version: u32,
    pub library_name: String,
    pub run_id: String,
    pub functions: Vec<String>,
    pub config_snapshot: String,
    pub created: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LedgerRecord {
    Header(HeaderRecord),
    Attempt(DriverAttempt),
    Outcome(OutcomeRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub library_name: String,
    pub run_id: String,
    pub functions: BTreeMap<String, FunctionOutcome>,
    pub config_snapshot: String,
    pub created: DateTime<Utc>,
}

impl RunLedger {
    pub fn new(
        library_name: impl Into<String>,
        run_id: impl Into<String>,
        functions: impl IntoIterator<Item = String>,
        config_snapshot: impl Into<String>,
    ) -> Self {
        Self {
            library_name: library_name.into(),
            run_id: run_id.into(),
            functions: functions.into_iter().map(|f| (f, FunctionOutcome::default())).collect(),
            config_snapshot: config_snapshot.into(),
            created: Utc::now(),
        }
    }

    fn header(&self) -> HeaderRecord {
        HeaderRecord {
            schema_version: LEDGER_SCHEMA_VERSION,
            library_name: self.library_name.clone(),
            run_id: self.run_id.clone(),
            functions: self.functions.keys().cloned().collect(),
            config_snapshot: self.config_snapshot.clone(),
            created: self.created,
        }
    }

    /// Applies an attempt in memory, enforcing the ledger invariants.
    pub fn apply_attempt(&mut self, attempt: DriverAttempt) -> Result<(), LedgerError> {
        let outcome = self
            .functions
            .get_mut(&attempt.function_name)
            .ok_or_else(|| LedgerError::UnknownFunction(attempt.function_name.clone()))?;
        let last = outcome.attempts.last().map(|a| a.attempt_index).unwrap_or(0);
        if attempt.attempt_index <= last {
            return Err(LedgerError::OutOfOrder {
                function: attempt.function_name,
                index: attempt.attempt_index,
                last,
            });
        }
        outcome.attempts.push(attempt);
        Ok(())
    }

    pub fn apply_outcome(&mut self, rec: OutcomeRecord) -> Result<(), LedgerError> {
        let outcome = self
            .functions
            .get_mut(&rec.function_name)
            .ok_or_else(|| LedgerError::UnknownFunction(rec.function_name.clone()))?;
        outcome.status = rec.status;
        outcome.reason = rec.reason;
        outcome.analysis_turns_used = rec.analysis_turns_used;
        Ok(())
    }

    /// Reconstructs a ledger from its file.
    pub fn load(path: &Path) -> Result<Self, LedgerError> {
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self, LedgerError> {
        let complete = text.ends_with('\n');
        let lines: Vec<&str> = text.lines().collect();
        let mut ledger: Option<RunLedger> = None;
        for (i, line) in lines.iter().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let last = i + 1 == lines.len();
            let rec: LedgerRecord = match serde_json::from_str(line) {
                Ok(r) => r,
                Err(_) if last && !complete => break,
                Err(e) => {
                    return Err(LedgerError::Malformed {
                        line: i + 1,
                        message: e.to_string(),
                    })
                }
            };
            let bad = |message: &str| LedgerError::Malformed {
                line: i + 1,
                message: message.to_string(),
            };
            match (rec, ledger.as_mut()) {
                (LedgerRecord::Header(h), None) => {
                    if h.schema_version != LEDGER_SCHEMA_VERSION {
                        return Err(bad(&format!("unsupported schema version {}", h.schema_version)));
                    }
                    let mut l = RunLedger::new(h.library_name, h.run_id, h.functions, h.config_snapshot);
                    l.created = h.created;
                    ledger = Some(l);
                }
                (LedgerRecord::Header(_), Some(_)) => return Err(bad("second header record")),
                (_, None) => return Err(bad("record before header")),
                (LedgerRecord::Attempt(a), Some(l)) => l.apply_attempt(a).map_err(|e| bad(&e.to_string()))?,
                (LedgerRecord::Outcome(o), Some(l)) => l.apply_outcome(o).map_err(|e| bad(&e.to_string()))?,
            }
        }
        ledger.ok_or(LedgerError::Malformed {
            line: 0,
            message: "missing header record".into(),
        })
    }

    /// Copy with run-specific noise removed: timestamps, durations, run id,
    /// configuration text and crash-file names.
    pub fn normalized(&self) -> RunLedger {
        let epoch = DateTime::<Utc>::UNIX_EPOCH;
        let mut l = self.clone();
        l.run_id.clear();
        l.config_snapshot.clear();
        l.created = epoch;
        for outcome in l.functions.values_mut() {
            for a in &mut outcome.attempts {
                a.timestamp = epoch;
                a.compile.duration = 0.0;
                a.compile.stderr_bytes = 0;
                if let Some(e) = a.exec.as_mut() {
                    e.wall_time = 0.0;
                    if e.crash_artifact.is_some() {
                        e.crash_artifact = Some("crash".into());
                    }
                }
            }
        }
        l
    }

    /// Canonical JSON of [`RunLedger::normalized`], suitable for byte comparison.
    pub fn normalized_json(&self) -> String {
        serde_json::to_string_pretty(&self.normalized()).expect("ledger serializes")
    }

    /// Canonical file text for this ledger.
    pub fn to_ldjson(&self) -> String {
        let mut out = String::new();
        let mut push = |rec: &LedgerRecord| {
            out.push_str(&serde_json::to_string(rec).expect("record serializes"));
            out.push('\n');
        };
        push(&LedgerRecord::Header(self.header()));
        for (name, outcome) in &self.functions {
            for a in &outcome.attempts {
                push(&LedgerRecord::Attempt(a.clone()));
            }
            if outcome.status != SessionStatus::Pending {
                push(&LedgerRecord::Outcome(OutcomeRecord {
                    function_name: name.clone(),
                    status: outcome.status,
                    reason: outcome.reason.clone(),
                    analysis_turns_used: outcome.analysis_turns_used,
                }));
            }
        }
        out
    }
}

/// Single writer for a ledger file. Every append is flushed and synced
/// before returning.
pub struct LedgerWriter {
    path: PathBuf,
    file: File,
    ledger: RunLedger,
}

impl LedgerWriter {
    /// Starts a new ledger file (truncating any previous one).
    pub fn create(path: &Path, ledger: RunLedger) -> Result<Self, LedgerError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = File::create(path)?;
        file.write_all(ledger.to_ldjson().as_bytes())?;
        file.sync_all()?;
        Ok(Self {
            path: path.to_path_buf(),
            file,
            ledger,
        })
    }

    /// Reopens an existing ledger for further appends, dropping a torn tail.
    pub fn resume(path: &Path) -> Result<Self, LedgerError> {
        let ledger = RunLedger::load(path)?;
        let mut w = Self::create(&path.with_extension("ldjson.tmp"), ledger)?;
        std::fs::rename(&w.path, path)?;
        w.path = path.to_path_buf();
        w.file = OpenOptions::new().append(true).open(path)?;
        Ok(w)
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn ledger(&self) -> &RunLedger {
        &self.ledger
    }

    pub fn into_ledger(self) -> RunLedger {
        self.ledger
    }

    fn append(&mut self, rec: &LedgerRecord) -> Result<(), LedgerError> {
        let mut line = serde_json::to_string(rec).expect("record serializes");
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.sync_data()?;
        Ok(())
    }

    pub fn record_attempt(&mut self, attempt: DriverAttempt) -> Result<(), LedgerError> {
        // validate against a scratch copy first so a rejected record never hits disk
        let mut next = self.ledger.functions.get(&attempt.function_name).cloned().ok_or_else(|| {
            LedgerError::UnknownFunction(attempt.function_name.clone())
        })?;
        let last = next.attempts.last().map(|a| a.attempt_index).unwrap_or(0);
        if attempt.attempt_index <= last {
            return Err(LedgerError::OutOfOrder {
                function: attempt.function_name,
                index: attempt.attempt_index,
                last,
            });
        }
        self.append(&LedgerRecord::Attempt(attempt.clone()))?;
        next.attempts.push(attempt);
        let name = next.attempts.last().expect("just pushed").function_name.clone();
        self.ledger.functions.insert(name, next);
        Ok(())
    }

    pub fn record_outcome(&mut self, rec: OutcomeRecord) -> Result<(), LedgerError> {
        if !self.ledger.functions.contains_key(&rec.function_name) {
            return Err(LedgerError::UnknownFunction(rec.function_name));
        }
        self.append(&LedgerRecord::Outcome(rec.clone()))?;
        self.ledger.apply_outcome(rec)
    }
}
