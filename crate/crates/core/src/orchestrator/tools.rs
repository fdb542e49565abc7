//! Analysis-phase tools offered to the model.

use crate::analysis::ExportedFunction;
use crate::disasm::{get_disassembly, Confidence, DisasmProvider, InferredSignature};
use crate::elf::BinaryImage;
use crate::llm::{ToolInvocation, ToolParam, ToolSpec};

pub const GET_SIGNATURE: &str = "get_signature";
pub const GET_DISASSEMBLY: &str = "get_disassembly";

/// Prefix of every tool result that refuses a call made outside analysis.
pub const PHASE_VIOLATION: &str = "refused: phase violation";

pub fn is_analysis_tool(name: &str) -> bool {
    name == GET_SIGNATURE || name == GET_DISASSEMBLY
}

pub fn analysis_tools() -> Vec<ToolSpec> {
    let function_param = || ToolParam {
        name: "function".into(),
        type_hint: "string".into(),
        required: true,
    };
    vec![
        ToolSpec {
            name: GET_SIGNATURE.into(),
            description: "Heuristic C signature recovered from the function's machine code.".into(),
            parameters: vec![function_param()],
        },
        ToolSpec {
            name: GET_DISASSEMBLY.into(),
            description: "Intel-syntax disassembly of the function.".into(),
            parameters: vec![function_param()],
        },
    ]
}

pub fn refusal_text(call: &ToolInvocation) -> String {
    format!(
        "{PHASE_VIOLATION}: `{}` is an analysis tool and analysis has ended; the analysis loop cannot be resumed. Reply with driver source code.",
        call.tool_name
    )
}

/// Tool access for one session, scoped to its single target function.
pub struct ToolContext<'a> {
    pub image: &'a BinaryImage,
    pub provider: &'a dyn DisasmProvider,
    pub function: &'a ExportedFunction,
    pub signature: &'a InferredSignature,
}

impl ToolContext<'_> {
    /// Result text for an analysis-phase call. Failures are reported as
    /// `error: ...` text so the session can continue.
    pub fn satisfy(&self, call: &ToolInvocation) -> String {
        if !is_analysis_tool(&call.tool_name) {
            return format!("error: unknown tool `{}`", call.tool_name);
        }
        if let Some(requested) = call.arguments.get("function") {
            if requested != &self.function.name {
                return format!(
                    "error: only `{}` can be analysed in this session (requested `{requested}`)",
                    self.function.name
                );
            }
        }
        match call.tool_name.as_str() {
            GET_SIGNATURE => format!(
                "{}\nconfidence: {}\naddress: {:#x}",
                self.signature.c_declaration(),
                match self.signature.confidence {
                    Confidence::Derived => "DERIVED",
                    Confidence::Defaulted => "DEFAULTED",
                },
                self.function.address
            ),
            _ => match get_disassembly(self.provider, self.image, self.function) {
                Ok(d) if d.instructions.is_empty() => "(empty function body)".into(),
                Ok(d) => d.text(),
                Err(e) => format!("error: {e}"),
            },
        }
    }
}
