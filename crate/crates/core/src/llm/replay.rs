use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BackendError, ChatBackend, ChatTurn, Role, SessionTranscript, ToolSpec};

pub const TRANSCRIPT_SCHEMA_VERSION: u32 = 1;

/// On-disk transcript: `{"schema_version":1,"backend_id":"...","turns":[{...}, ...]}`
/// with one object per turn in the same shape as [`ChatTurn`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptFile {
    pub schema_version: u32,
    pub backend_id: String,
    /// Index of the first turn after the analysis phase ended, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_start: Option<usize>,
    pub turns: Vec<ChatTurn>,
}

impl From<&SessionTranscript> for TranscriptFile {
    fn from(t: &SessionTranscript) -> Self {
        Self {
            schema_version: TRANSCRIPT_SCHEMA_VERSION,
            backend_id: t.backend_id().to_string(),
            generation_start: None,
            turns: t.turns().to_vec(),
        }
    }
}

/// Writes the transcript as one self-contained file (via a temporary file
/// and rename, so a reader never sees a partial transcript).
pub fn record_transcript(transcript: &SessionTranscript, sink: &Path) -> std::io::Result<()> {
    TranscriptFile::from(transcript).write(sink)
}

impl TranscriptFile {
    pub fn write(&self, sink: &Path) -> std::io::Result<()> {
        write_atomically(self, sink)
    }
}

fn write_atomically(file: &TranscriptFile, sink: &Path) -> std::io::Result<()> {
    let body = serde_json::to_vec_pretty(file).map_err(std::io::Error::other)?;
    let tmp = sink.with_extension("json.tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&body)?;
        f.write_all(b"\n")?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, sink)
}

pub fn load_transcript(path: &Path) -> Result<TranscriptFile, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file: TranscriptFile =
        serde_json::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    if file.schema_version != TRANSCRIPT_SCHEMA_VERSION {
        return Err(format!(
            "{}: unsupported transcript schema version {}",
            path.display(),
            file.schema_version
        ));
    }
    Ok(file)
}

/// Emits the recorded ASSISTANT turns in order, then reports exhaustion.
pub struct ReplayBackend {
    source_id: String,
    pending: VecDeque<ChatTurn>,
}

impl ReplayBackend {
    pub fn new(file: TranscriptFile) -> Self {
        Self {
            source_id: file.backend_id,
            pending: file
                .turns
                .into_iter()
                .filter(|t| t.role == Role::Assistant)
                .collect(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, String> {
        load_transcript(path).map(Self::new)
    }

    pub fn remaining(&self) -> usize {
        self.pending.len()
    }
}

impl ChatBackend for ReplayBackend {
    fn id(&self) -> String {
        format!("replay:{}", self.source_id)
    }

    fn complete(&mut self, _turns: &[ChatTurn], _tools: &[ToolSpec]) -> Result<ChatTurn, BackendError> {
        self.pending.pop_front().ok_or(BackendError::TranscriptExhausted)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::llm::ToolInvocation;

    fn seven_turns() -> SessionTranscript {
        let mut t = SessionTranscript::new("scripted", ChatTurn::system("s")).unwrap();
        t.push(ChatTurn::user("analyze")).unwrap();
        let mut a = ChatTurn::assistant("");
        a.tool_calls.push(ToolInvocation {
            id: "call-1".into(),
            tool_name: "get_disassembly".into(),
            arguments: [("function".to_string(), "add".to_string())].into(),
        });
        t.push(a).unwrap();
        t.push(ChatTurn::tool_result("call-1", "0x0: ret")).unwrap();
        t.push(ChatTurn::assistant("done analysing")).unwrap();
        t.push(ChatTurn::user("generate")).unwrap();
        t.push(ChatTurn::assistant("```c\nint LLVMFuzzerTestOneInput() {}\n```")).unwrap();
        t
    }

    #[test]
    fn seven_turn_session_replays_three_assistant_turns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("add.json");
        let t = seven_turns();
        assert_eq!(t.len(), 7);
        record_transcript(&t, &path).unwrap();
        let mut b = ReplayBackend::from_file(&path).unwrap();
        let expected: Vec<_> = t.turns().iter().filter(|x| x.role == Role::Assistant).cloned().collect();
        for e in &expected {
            assert_eq!(&b.complete(&[], &[]).unwrap(), e);
        }
        assert_eq!(b.complete(&[], &[]), Err(BackendError::TranscriptExhausted));
    }

    #[test]
    fn system_only_transcript() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        let t = SessionTranscript::new("x", ChatTurn::system("s")).unwrap();
        record_transcript(&t, &path).unwrap();
        let file = load_transcript(&path).unwrap();
        assert_eq!(file.turns.len(), 1);
        assert_eq!(ReplayBackend::new(file).remaining(), 0);
    }

    #[test]
    fn unwritable_sink() {
        let t = SessionTranscript::new("x", ChatTurn::system("s")).unwrap();
        assert!(record_transcript(&t, Path::new("/nonexistent/dir/t.json")).is_err());
    }

    #[test]
    fn schema_version_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.json");
        std::fs::write(&path, r#"{"schema_version":9,"backend_id":"x","turns":[]}"#).unwrap();
        assert!(load_transcript(&path).is_err());
    }
}
