//! Per-function disassembly and heuristic signature recovery.
//!
//! Providers only decode bytes into Intel-syntax instruction text. Function
//! extents and signature inference live here so that every provider is judged
//! by the same rules.

mod adapter;
mod builtin;
mod infer;
pub mod objdump;

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::analysis::ExportedFunction;
use crate::elf::{BinaryImage, SHF_ALLOC};

pub use adapter::{AdapterRequest, AdapterResponse, ExternalAdapter};
pub use builtin::BuiltinDecoder;
pub use infer::{infer_from_disassembly, ARG_REGISTERS};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum DisasmError {
    #[error("disassembler adapter unavailable: {0}")]
    AdapterUnavailable(String),
    #[error("decode failure: {0}")]
    DecodeFailure(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instruction {
    pub address: u64,
    pub mnemonic: String,
    #[serde(default)]
    pub operands: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Disassembly {
    pub function_name: String,
    pub instructions: Vec<Instruction>,
    pub byte_length: u64,
}

impl Disassembly {
    /// One `address: mnemonic operands` line per instruction.
    pub fn text(&self) -> String {
        let mut out = String::new();
        for insn in &self.instructions {
            out.push_str(&format!("{:#x}: {}", insn.address, insn.mnemonic));
            if !insn.operands.is_empty() {
                out.push('\t');
                out.push_str(&insn.operands);
            }
            out.push('\n');
        }
        out
    }

    /// Inverse of [`Disassembly::text`] for the instruction list.
    pub fn parse_text(text: &str) -> Result<Vec<Instruction>, DisasmError> {
        text.lines()
            .filter(|l| !l.is_empty())
            .map(|line| {
                let (addr, rest) = line
                    .split_once(": ")
                    .ok_or_else(|| DisasmError::DecodeFailure(format!("bad line: {line}")))?;
                let address = u64::from_str_radix(addr.trim_start_matches("0x"), 16)
                    .map_err(|e| DisasmError::DecodeFailure(format!("bad address {addr}: {e}")))?;
                let (mnemonic, operands) = rest.split_once('\t').unwrap_or((rest, ""));
                Ok(Instruction {
                    address,
                    mnemonic: mnemonic.to_string(),
                    operands: operands.to_string(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TypeClass {
    Int64,
    Int32,
    Float64,
    PtrOpaque,
    Void,
}

impl TypeClass {
    pub fn c_type(self) -> &'static str {
        match self {
            TypeClass::Int64 => "int64_t",
            TypeClass::Int32 => "int32_t",
            TypeClass::Float64 => "double",
            TypeClass::PtrOpaque => "void *",
            TypeClass::Void => "void",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Confidence {
    Derived,
    Defaulted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InferredSignature {
    pub function_name: String,
    pub return_class: TypeClass,
    pub params: Vec<TypeClass>,
    pub confidence: Confidence,
}

impl InferredSignature {
    pub fn arity(&self) -> usize {
        self.params.len()
    }

    /// C prototype, e.g. `int64_t cJSON_Print(int64_t arg1)`.
    pub fn c_declaration(&self) -> String {
        let params = if self.params.is_empty() {
            "void".to_string()
        } else {
            self.params
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    let ty = t.c_type();
                    if ty.ends_with('*') {
                        format!("{ty}arg{}", i + 1)
                    } else {
                        format!("{ty} arg{}", i + 1)
                    }
                })
                .collect::<Vec<_>>()
                .join(", ")
        };
        format!("{} {}({})", self.return_class.c_type(), self.function_name, params)
    }
}

impl fmt::Display for InferredSignature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.c_declaration())
    }
}

/// Byte range of a function: up to the next defined symbol in the same
/// section, or to the first return when no later symbol exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub start: u64,
    pub end: u64,
    pub stop_at_return: bool,
}

impl Extent {
    pub fn len(&self) -> u64 {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end == self.start
    }
}

pub fn function_extent(image: &BinaryImage, address: u64) -> Result<Extent, DisasmError> {
    let sec = image.section_for_addr(address).ok_or_else(|| {
        DisasmError::DecodeFailure(format!("address {address:#x} is not in a mapped section"))
    })?;
    if !sec.is_executable() {
        return Err(DisasmError::DecodeFailure(format!(
            "address {address:#x} lies in non-executable section {}",
            sec.name
        )));
    }
    let next = image
        .dynamic_symbols
        .iter()
        .filter(|s| s.is_defined() && s.value > address && s.value < sec.end_addr())
        .map(|s| s.value)
        .min();
    Ok(match next {
        Some(end) => Extent {
            start: address,
            end,
            stop_at_return: false,
        },
        None => Extent {
            start: address,
            end: sec.end_addr(),
            stop_at_return: true,
        },
    })
}

/// A decoder backend. Implementations must tolerate concurrent calls.
pub trait DisasmProvider: Send + Sync {
    fn name(&self) -> &str;

    fn decode_range(
        &self,
        image: &BinaryImage,
        start: u64,
        len: u64,
    ) -> Result<Vec<Instruction>, DisasmError>;
}

fn is_return(mnemonic: &str) -> bool {
    matches!(infer::base_mnemonic(mnemonic), "ret" | "retq" | "retn")
}

pub fn get_disassembly(
    provider: &dyn DisasmProvider,
    image: &BinaryImage,
    function: &ExportedFunction,
) -> Result<Disassembly, DisasmError> {
    let extent = function_extent(image, function.address)?;
    if extent.is_empty() {
        return Ok(Disassembly {
            function_name: function.name.clone(),
            instructions: Vec::new(),
            byte_length: 0,
        });
    }
    let mut instructions = provider.decode_range(image, extent.start, extent.len())?;
    if instructions.windows(2).any(|w| w[0].address >= w[1].address) {
        return Err(DisasmError::DecodeFailure(format!(
            "{} returned non-ascending addresses",
            provider.name()
        )));
    }
    let mut end = extent.end;
    if extent.stop_at_return {
        if let Some(pos) = instructions.iter().position(|i| is_return(&i.mnemonic)) {
            instructions.truncate(pos + 1);
            // ret is a single byte unless it carries an immediate
            end = instructions[pos].address + if instructions[pos].operands.is_empty() { 1 } else { 3 };
        }
    }
    Ok(Disassembly {
        function_name: function.name.clone(),
        instructions,
        byte_length: end - extent.start,
    })
}

pub fn infer_signature(
    provider: &dyn DisasmProvider,
    image: &BinaryImage,
    function: &ExportedFunction,
) -> Result<InferredSignature, DisasmError> {
    let disasm = get_disassembly(provider, image, function)?;
    Ok(infer_from_disassembly(&disasm))
}

/// True when `addr` is inside an allocated section (used by adapters to
/// validate requests before touching the file).
pub fn is_mapped(image: &BinaryImage, addr: u64) -> bool {
    image
        .section_for_addr(addr)
        .map(|s| s.flags & SHF_ALLOC != 0)
        .unwrap_or(false)
}
