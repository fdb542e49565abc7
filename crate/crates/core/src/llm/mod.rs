//! Message protocol with a chat model backend: typed turns, tool calls,
//! throttled sending with retries, and record/replay.

mod http;
mod limiter;
mod replay;
mod scripted;

use std::collections::{BTreeMap, HashSet};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use http::{HttpBackend, HttpConfig, DEFAULT_API_KEY_ENV};
pub use limiter::{max_in_window, Clock, RateLimiter, SystemClock, VirtualClock};
pub use replay::{load_transcript, record_transcript, ReplayBackend, TranscriptFile, TRANSCRIPT_SCHEMA_VERSION};
pub use scripted::{Matcher, ScriptRule, ScriptedBackend, ScriptedResponse, ScriptedToolCall};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Role {
    System,
    User,
    Assistant,
    ToolResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolInvocation {
    pub id: String,
    pub tool_name: String,
    #[serde(default)]
    pub arguments: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatTurn {
    pub role: Role,
    #[serde(default)]
    pub content: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tool_calls: Vec<ToolInvocation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_call_id: Option<String>,
}

impl ChatTurn {
    fn plain(role: Role, content: impl Into<String>) -> Self {
        Self {
            role,
            content: content.into(),
            tool_calls: Vec::new(),
            tool_call_id: None,
        }
    }

    pub fn system(content: impl Into<String>) -> Self {
        Self::plain(Role::System, content)
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self::plain(Role::User, content)
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self::plain(Role::Assistant, content)
    }

    pub fn tool_result(id: impl Into<String>, content: impl Into<String>) -> Self {
        Self {
            tool_call_id: Some(id.into()),
            ..Self::plain(Role::ToolResult, content)
        }
    }

    fn estimate(&self) -> u64 {
        let mut chars = self.content.chars().count();
        for call in &self.tool_calls {
            chars += call.id.len() + call.tool_name.len();
            chars += call.arguments.iter().map(|(k, v)| k.len() + v.len()).sum::<usize>();
        }
        (chars as u64).div_ceil(4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolParam {
    pub name: String,
    pub type_hint: String,
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToolSpec {
    pub name: String,
    pub description: String,
    pub parameters: Vec<ToolParam>,
}

/// Names must be unique within one registry.
pub fn check_registry(tools: &[ToolSpec]) -> Result<(), String> {
    let mut seen = HashSet::new();
    for t in tools {
        if !seen.insert(t.name.as_str()) {
            return Err(format!("duplicate tool name {}", t.name));
        }
    }
    Ok(())
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TranscriptError {
    #[error("a transcript must begin with exactly one SYSTEM turn")]
    SystemTurn,
    #[error("tool result references unknown call id {0:?}")]
    UnknownCallId(Option<String>),
    #[error("{0} turns may not carry tool calls")]
    MisplacedToolCalls(&'static str),
}

/// Append-only conversation log for one session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionTranscript {
    backend_id: String,
    turns: Vec<ChatTurn>,
    token_estimate: u64,
}

impl SessionTranscript {
    pub fn new(backend_id: impl Into<String>, system: ChatTurn) -> Result<Self, TranscriptError> {
        let mut t = Self {
            backend_id: backend_id.into(),
            turns: Vec::new(),
            token_estimate: 0,
        };
        t.push(system)?;
        Ok(t)
    }

    /// Rebuild from stored turns, validating each append.
    pub fn from_turns(
        backend_id: impl Into<String>,
        turns: Vec<ChatTurn>,
    ) -> Result<Self, TranscriptError> {
        let mut iter = turns.into_iter();
        let first = iter.next().ok_or(TranscriptError::SystemTurn)?;
        let mut t = Self::new(backend_id, first)?;
        for turn in iter {
            t.push(turn)?;
        }
        Ok(t)
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    pub fn turns(&self) -> &[ChatTurn] {
        &self.turns
    }

    pub fn token_estimate(&self) -> u64 {
        self.token_estimate
    }

    pub fn len(&self) -> usize {
        self.turns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn push(&mut self, turn: ChatTurn) -> Result<(), TranscriptError> {
        let first = self.turns.is_empty();
        if first != (turn.role == Role::System) {
            return Err(TranscriptError::SystemTurn);
        }
        match turn.role {
            Role::Assistant => {}
            Role::ToolResult => {
                let issued = self
                    .turns
                    .iter()
                    .rev()
                    .find(|t| t.role == Role::Assistant)
                    .map(|t| t.tool_calls.iter().any(|c| Some(&c.id) == turn.tool_call_id.as_ref()))
                    .unwrap_or(false);
                if !issued {
                    return Err(TranscriptError::UnknownCallId(turn.tool_call_id));
                }
            }
            Role::System => {
                if !turn.tool_calls.is_empty() {
                    return Err(TranscriptError::MisplacedToolCalls("SYSTEM"));
                }
            }
            Role::User => {
                if !turn.tool_calls.is_empty() {
                    return Err(TranscriptError::MisplacedToolCalls("USER"));
                }
            }
        }
        self.token_estimate += turn.estimate();
        self.turns.push(turn);
        Ok(())
    }

    /// Turns to send when the context must stay under `ceiling` estimated
    /// tokens. The stored transcript is never modified; the oldest non-SYSTEM
    /// turns are folded into one USER recap in the returned view only.
    pub fn request_view(&self, ceiling: Option<u64>) -> Vec<ChatTurn> {
        let Some(ceiling) = ceiling else {
            return self.turns.clone();
        };
        if self.token_estimate <= ceiling || self.turns.len() < 3 {
            return self.turns.clone();
        }
        let mut remaining = self.token_estimate;
        let mut cut = 1;
        // keep at least the latest turn; never strand a tool result without its call
        while cut < self.turns.len() - 1 && remaining > ceiling {
            remaining -= self.turns[cut].estimate();
            cut += 1;
            while cut < self.turns.len() - 1 && self.turns[cut].role == Role::ToolResult {
                remaining -= self.turns[cut].estimate();
                cut += 1;
            }
        }
        let mut recap = String::from("Recap of the earlier conversation:\n");
        for turn in &self.turns[1..cut] {
            let snippet: String = turn.content.chars().take(200).collect();
            recap.push_str(&format!("- {:?}: {}\n", turn.role, snippet.replace('\n', " ")));
            for call in &turn.tool_calls {
                recap.push_str(&format!("  called {} {:?}\n", call.tool_name, call.arguments));
            }
        }
        let mut view = vec![self.turns[0].clone(), ChatTurn::user(recap)];
        view.extend_from_slice(&self.turns[cut..]);
        view
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum BackendError {
    #[error("backend unreachable: {0}")]
    Unreachable(String),
    #[error("throttled: {detail}")]
    Throttled {
        retry_after: Option<Duration>,
        detail: String,
    },
    #[error("malformed response: {0}")]
    Malformed(String),
    #[error("no scripted rule matched: {0}")]
    NoRuleMatched(String),
    #[error("transcript exhausted")]
    TranscriptExhausted,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LlmError {
    #[error("backend unreachable: {0}")]
    BackendUnreachable(String),
    #[error("rate limited after {attempts} attempts")]
    RateLimitedExhausted { attempts: u32 },
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted rule matched: {0}")]
    NoRuleMatched(String),
    #[error("transcript exhausted")]
    TranscriptExhausted,
}

/// A chat-completion provider. One instance serves one session.
pub trait ChatBackend: Send {
    fn id(&self) -> String;
    fn complete(&mut self, turns: &[ChatTurn], tools: &[ToolSpec]) -> Result<ChatTurn, BackendError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub base: Duration,
    pub factor: u32,
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            base: Duration::from_secs(2),
            factor: 2,
            max_attempts: 5,
        }
    }
}

impl RetryPolicy {
    /// Delay after the `n`th failed attempt (1-based).
    pub fn delay(&self, n: u32) -> Duration {
        self.base * self.factor.saturating_pow(n.saturating_sub(1))
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SessionStats {
    pub requests: u64,
    pub retries: u64,
}

pub struct LlmSession {
    backend: Box<dyn ChatBackend>,
    limiter: Arc<RateLimiter>,
    retry: RetryPolicy,
    context_ceiling: Option<u64>,
    stats: SessionStats,
}

impl LlmSession {
    pub fn new(backend: Box<dyn ChatBackend>, limiter: Arc<RateLimiter>) -> Self {
        Self {
            backend,
            limiter,
            retry: RetryPolicy::default(),
            context_ceiling: None,
            stats: SessionStats::default(),
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_context_ceiling(mut self, ceiling: Option<u64>) -> Self {
        self.context_ceiling = ceiling;
        self
    }

    pub fn backend_id(&self) -> String {
        self.backend.id()
    }

    pub fn stats(&self) -> SessionStats {
        self.stats
    }

    pub fn send(
        &mut self,
        transcript: &SessionTranscript,
        tools: &[ToolSpec],
    ) -> Result<ChatTurn, LlmError> {
        let view = transcript.request_view(self.context_ceiling);
        let mut attempt = 0;
        loop {
            attempt += 1;
            self.limiter.acquire();
            self.stats.requests += 1;
            match self.backend.complete(&view, tools) {
                Ok(turn) => return check_reply(turn),
                Err(BackendError::Throttled { retry_after, .. }) => {
                    if attempt >= self.retry.max_attempts {
                        return Err(LlmError::RateLimitedExhausted { attempts: attempt });
                    }
                    self.stats.retries += 1;
                    let wait = retry_after.unwrap_or_else(|| self.retry.delay(attempt));
                    self.limiter.clock().sleep(wait);
                }
                Err(BackendError::Unreachable(e)) => return Err(LlmError::BackendUnreachable(e)),
                Err(BackendError::Malformed(e)) => return Err(LlmError::MalformedResponse(e)),
                Err(BackendError::NoRuleMatched(e)) => return Err(LlmError::NoRuleMatched(e)),
                Err(BackendError::TranscriptExhausted) => return Err(LlmError::TranscriptExhausted),
            }
        }
    }
}

fn check_reply(turn: ChatTurn) -> Result<ChatTurn, LlmError> {
    if turn.role != Role::Assistant {
        return Err(LlmError::MalformedResponse(format!(
            "expected an ASSISTANT turn, got {:?}",
            turn.role
        )));
    }
    let mut ids = HashSet::new();
    for call in &turn.tool_calls {
        if call.id.is_empty() || !ids.insert(call.id.as_str()) {
            return Err(LlmError::MalformedResponse(format!(
                "tool call ids must be unique and non-empty: {:?}",
                call.id
            )));
        }
    }
    Ok(turn)
}
