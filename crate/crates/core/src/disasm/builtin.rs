use std::collections::HashMap;
use std::sync::{Mutex, PoisonError};

use iced_x86::{
    Decoder, DecoderOptions, FlowControl, Formatter, Instruction as IcedInstruction, IntelFormatter,
    MemorySizeOptions,
};

use super::{DisasmError, DisasmProvider, Instruction};
use crate::elf::{BinaryImage, SymbolType};

/// In-process x86-64 decoder. Output mimics `objdump -M intel` closely enough
/// for the shared inference rules: lowercase registers, `0x` displacements,
/// explicit memory sizes and `<symbol>` annotations on branch targets.
#[derive(Default)]
pub struct BuiltinDecoder {
    // keyed by image path; names are per-image and cheap to rebuild
    names: Mutex<HashMap<std::path::PathBuf, SymbolNames>>,
}

#[derive(Clone, Default)]
struct SymbolNames {
    by_addr: HashMap<u64, String>,
    got: HashMap<u64, String>,
}

impl BuiltinDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    fn names_for(&self, image: &BinaryImage) -> SymbolNames {
        let mut cache = self.names.lock().unwrap_or_else(PoisonError::into_inner);
        cache
            .entry(image.path.clone())
            .or_insert_with(|| build_names(image))
            .clone()
    }
}

fn formatter() -> IntelFormatter {
    let mut f = IntelFormatter::new();
    let o = f.options_mut();
    o.set_hex_prefix("0x");
    o.set_hex_suffix("");
    o.set_uppercase_hex(false);
    o.set_space_after_operand_separator(false);
    o.set_memory_size_options(MemorySizeOptions::Always);
    o.set_rip_relative_addresses(true);
    o.set_branch_leading_zeros(false);
    o.set_small_hex_numbers_in_decimal(false);
    o.set_show_branch_size(false);
    f
}

fn build_names(image: &BinaryImage) -> SymbolNames {
    let mut names = SymbolNames::default();
    for sym in &image.dynamic_symbols {
        if sym.is_defined() && matches!(sym.kind, SymbolType::Func | SymbolType::GnuIfunc) {
            names.by_addr.entry(sym.value).or_insert_with(|| sym.name.clone());
        }
    }
    for (slot, name) in &image.got_imports {
        names.got.insert(*slot, name.clone());
    }

    // PLT stubs jump through their GOT slot; name each stub after the import.
    for sec_name in [".plt", ".plt.sec", ".plt.got"] {
        let Some(sec) = image.section_by_name(sec_name) else {
            continue;
        };
        let Some(bytes) = image.bytes_at(sec.addr, sec.size) else {
            continue;
        };
        let mut decoder = Decoder::with_ip(64, bytes, sec.addr, DecoderOptions::NONE);
        let mut insn = IcedInstruction::default();
        let mut stub_start: Option<u64> = None;
        while decoder.can_decode() {
            decoder.decode_out(&mut insn);
            let padding = matches!(
                insn.mnemonic(),
                iced_x86::Mnemonic::Nop | iced_x86::Mnemonic::Int3
            );
            if stub_start.is_none() && !padding {
                stub_start = Some(insn.ip());
            }
            if insn.flow_control() == FlowControl::IndirectBranch && insn.is_ip_rel_memory_operand() {
                if let (Some(start), Some(name)) =
                    (stub_start, names.got.get(&insn.ip_rel_memory_address()))
                {
                    names.by_addr.entry(start).or_insert_with(|| format!("{name}@plt"));
                }
            }
            if matches!(
                insn.flow_control(),
                FlowControl::UnconditionalBranch | FlowControl::IndirectBranch
            ) {
                stub_start = None;
            }
        }
    }
    names
}

impl DisasmProvider for BuiltinDecoder {
    fn name(&self) -> &str {
        "builtin"
    }

    fn decode_range(
        &self,
        image: &BinaryImage,
        start: u64,
        len: u64,
    ) -> Result<Vec<Instruction>, DisasmError> {
        let bytes = image.bytes_at(start, len).ok_or_else(|| {
            DisasmError::DecodeFailure(format!("no file bytes backing {start:#x}"))
        })?;
        let names = self.names_for(image);
        let mut fmt = formatter();
        let mut decoder = Decoder::with_ip(64, bytes, start, DecoderOptions::NONE);
        let mut insn = IcedInstruction::default();
        let mut out = Vec::new();
        while decoder.can_decode() {
            decoder.decode_out(&mut insn);
            if insn.is_invalid() {
                // a partial instruction at the tail of the range is not an error
                if decoder.last_error() == iced_x86::DecoderError::NoMoreBytes {
                    break;
                }
                return Err(DisasmError::DecodeFailure(format!(
                    "invalid instruction at {:#x}",
                    insn.ip()
                )));
            }
            let mut mnemonic = String::new();
            fmt.format_mnemonic(&insn, &mut mnemonic);
            let mut operands = String::new();
            fmt.format_all_operands(&insn, &mut operands);

            let target = match insn.flow_control() {
                FlowControl::Call | FlowControl::UnconditionalBranch | FlowControl::ConditionalBranch => {
                    names.by_addr.get(&insn.near_branch_target())
                }
                FlowControl::IndirectCall | FlowControl::IndirectBranch
                    if insn.is_ip_rel_memory_operand() =>
                {
                    names.got.get(&insn.ip_rel_memory_address())
                }
                _ => None,
            };
            if let Some(name) = target {
                operands.push_str(&format!(" <{name}>"));
            }
            out.push(Instruction {
                address: insn.ip(),
                mnemonic,
                operands,
            });
        }
        Ok(out)
    }
}
