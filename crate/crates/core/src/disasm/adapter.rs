//! Client side of the external disassembler protocol.
//!
//! The adapter is a long-lived child process. Each request is one JSON line
//! on its stdin; each response is one JSON line on its stdout:
//!
//! ```text
//! -> {"op":"disasm","path":"/abs/lib.so","address":4476,"length":24}
//! <- {"ok":true,"instructions":[{"address":4476,"mnemonic":"push","operands":"rbp"}]}
//! <- {"ok":false,"error":"objdump failed: ..."}
//! ```
//!
//! Instructions use Intel syntax. Any tool that speaks this protocol can be
//! plugged in through configuration.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::{Mutex, PoisonError};

use serde::{Deserialize, Serialize};

use super::{DisasmError, DisasmProvider, Instruction};
use crate::elf::BinaryImage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterRequest {
    pub op: String,
    pub path: String,
    pub address: u64,
    pub length: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterResponse {
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub instructions: Vec<Instruction>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

struct ChildIo {
    child: Child,
    stdin: ChildStdin,
    stdout: BufReader<ChildStdout>,
}

impl Drop for ChildIo {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Requests are serialized through one child process.
pub struct ExternalAdapter {
    argv: Vec<String>,
    label: String,
    io: Mutex<Option<ChildIo>>,
}

impl ExternalAdapter {
    pub fn new(argv: Vec<String>) -> Result<Self, DisasmError> {
        if argv.is_empty() {
            return Err(DisasmError::AdapterUnavailable("empty adapter command".into()));
        }
        let label = format!("adapter:{}", argv[0]);
        Ok(Self {
            argv,
            label,
            io: Mutex::new(None),
        })
    }

    /// Parse a shell-style command line.
    pub fn from_command_line(cmd: &str) -> Result<Self, DisasmError> {
        let argv = shell_words::split(cmd)
            .map_err(|e| DisasmError::AdapterUnavailable(format!("bad adapter command: {e}")))?;
        Self::new(argv)
    }

    fn spawn(&self) -> Result<ChildIo, DisasmError> {
        let mut child = Command::new(&self.argv[0])
            .args(&self.argv[1..])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| DisasmError::AdapterUnavailable(format!("{}: {e}", self.argv[0])))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(ChildIo {
            child,
            stdin,
            stdout,
        })
    }

    fn round_trip(io: &mut ChildIo, request: &AdapterRequest) -> Result<AdapterResponse, String> {
        let mut line = serde_json::to_string(request).map_err(|e| e.to_string())?;
        line.push('\n');
        io.stdin.write_all(line.as_bytes()).map_err(|e| e.to_string())?;
        io.stdin.flush().map_err(|e| e.to_string())?;
        let mut reply = String::new();
        let n = io.stdout.read_line(&mut reply).map_err(|e| e.to_string())?;
        if n == 0 {
            return Err("adapter closed its output".into());
        }
        serde_json::from_str(&reply).map_err(|e| format!("malformed adapter reply: {e}"))
    }
}

impl DisasmProvider for ExternalAdapter {
    fn name(&self) -> &str {
        &self.label
    }

    fn decode_range(
        &self,
        image: &BinaryImage,
        start: u64,
        len: u64,
    ) -> Result<Vec<Instruction>, DisasmError> {
        let path = std::fs::canonicalize(&image.path).unwrap_or_else(|_| image.path.clone());
        let request = AdapterRequest {
            op: "disasm".into(),
            path: path.to_string_lossy().into_owned(),
            address: start,
            length: len,
        };
        let mut guard = self.io.lock().unwrap_or_else(PoisonError::into_inner);
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let io = guard.as_mut().expect("spawned above");
        let response = match Self::round_trip(io, &request) {
            Ok(r) => r,
            Err(e) => {
                // the child is in an unknown state; respawn on next request
                *guard = None;
                return Err(DisasmError::AdapterUnavailable(e));
            }
        };
        drop(guard);
        if !response.ok {
            return Err(DisasmError::DecodeFailure(
                response.error.unwrap_or_else(|| "adapter reported failure".into()),
            ));
        }
        let end = start + len;
        Ok(response
            .instructions
            .into_iter()
            .filter(|i| i.address >= start && i.address < end)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_command_is_unavailable() {
        let adapter = ExternalAdapter::new(vec!["/nonexistent/disasm-tool".into()]).unwrap();
        let image = crate::elf::parse_binary("x".into(), vec![0; 4]);
        assert!(image.is_err());
        let err = adapter.spawn().err().unwrap();
        assert!(matches!(err, DisasmError::AdapterUnavailable(_)));
    }

    #[test]
    fn empty_command_rejected() {
        assert!(ExternalAdapter::from_command_line("").is_err());
    }

    #[test]
    fn protocol_shapes() {
        let req = AdapterRequest {
            op: "disasm".into(),
            path: "/x.so".into(),
            address: 16,
            length: 8,
        };
        assert_eq!(
            serde_json::to_string(&req).unwrap(),
            r#"{"op":"disasm","path":"/x.so","address":16,"length":8}"#
        );
        let resp: AdapterResponse = serde_json::from_str(
            r#"{"ok":true,"instructions":[{"address":16,"mnemonic":"ret","operands":""}]}"#,
        )
        .unwrap();
        assert_eq!(resp.instructions[0].mnemonic, "ret");
    }
}
