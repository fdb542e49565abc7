//! Register-usage signature inference over Intel-syntax instruction text.
//!
//! The sweep walks the function linearly from its entry and stops at the
//! first terminator: `ret`, `hlt`, `ud2`, `int3`, or a `jmp` leaving the
//! function (a tail call). Jumps that stay inside the function are stepped
//! over so the blocks behind them are still seen in address order. Only
//! the System V integer argument registers are considered, so at most six
//! parameters are recovered. Every integer-like parameter is reported as
//! `INT64`; a parameter is upgraded to `PTR_OPAQUE` when its value (directly,
//! through a register copy, or through a 64-bit stack spill) is used as a
//! memory base, or is passed in a pointer position to a recognized memory or
//! string routine.

use std::collections::HashMap;

use super::{Confidence, Disassembly, InferredSignature, TypeClass};

pub const ARG_REGISTERS: [&str; 6] = ["rdi", "rsi", "rdx", "rcx", "r8", "r9"];

const CALLER_SAVED: [&str; 9] = ["rax", "rcx", "rdx", "rsi", "rdi", "r8", "r9", "r10", "r11"];

const PREFIXES: &[&str] = &[
    "lock", "rep", "repe", "repz", "repne", "repnz", "bnd", "notrack", "data16", "addr32", "cs",
    "ds", "es", "ss", "fs", "gs",
];

/// (name, arity, pointer argument positions)
const KNOWN_ROUTINES: &[(&str, usize, &[usize])] = &[
    ("memcpy", 3, &[0, 1]),
    ("memmove", 3, &[0, 1]),
    ("memset", 3, &[0]),
    ("memcmp", 3, &[0, 1]),
    ("memchr", 3, &[0]),
    ("bcmp", 3, &[0, 1]),
    ("bzero", 2, &[0]),
    ("strlen", 1, &[0]),
    ("strnlen", 2, &[0]),
    ("strcpy", 2, &[0, 1]),
    ("stpcpy", 2, &[0, 1]),
    ("strncpy", 3, &[0, 1]),
    ("strcat", 2, &[0, 1]),
    ("strncat", 3, &[0, 1]),
    ("strcmp", 2, &[0, 1]),
    ("strncmp", 3, &[0, 1]),
    ("strcasecmp", 2, &[0, 1]),
    ("strncasecmp", 3, &[0, 1]),
    ("strchr", 2, &[0]),
    ("strrchr", 2, &[0]),
    ("strstr", 2, &[0, 1]),
    ("strspn", 2, &[0, 1]),
    ("strcspn", 2, &[0, 1]),
    ("strtok", 2, &[1]),
    ("strdup", 1, &[0]),
    ("strndup", 2, &[0]),
    ("strtol", 3, &[0]),
    ("strtoul", 3, &[0]),
    ("strtoll", 3, &[0]),
    ("strtoull", 3, &[0]),
    ("strtod", 2, &[0]),
    ("atoi", 1, &[0]),
    ("atol", 1, &[0]),
    ("atof", 1, &[0]),
    ("puts", 1, &[0]),
    ("fputs", 2, &[0, 1]),
    ("sprintf", 2, &[0, 1]),
    ("snprintf", 3, &[0, 2]),
    ("sscanf", 2, &[0, 1]),
];

/// Strip prefixes (`rep`, `bnd`, `notrack`, ...) and return the operation.
pub(crate) fn base_mnemonic(mnemonic: &str) -> &str {
    mnemonic
        .split_whitespace()
        .find(|tok| !PREFIXES.contains(&tok.to_ascii_lowercase().as_str()))
        .unwrap_or("")
}

fn has_rep_prefix(mnemonic: &str) -> bool {
    mnemonic
        .split_whitespace()
        .any(|t| t.eq_ignore_ascii_case("rep") || t.to_ascii_lowercase().starts_with("rep"))
}

fn canonical_register(name: &str) -> Option<(&'static str, u8)> {
    const TABLE: &[(&str, &str, u8)] = &[
        ("rax", "rax", 64), ("eax", "rax", 32), ("ax", "rax", 16), ("al", "rax", 8), ("ah", "rax", 8),
        ("rbx", "rbx", 64), ("ebx", "rbx", 32), ("bx", "rbx", 16), ("bl", "rbx", 8), ("bh", "rbx", 8),
        ("rcx", "rcx", 64), ("ecx", "rcx", 32), ("cx", "rcx", 16), ("cl", "rcx", 8), ("ch", "rcx", 8),
        ("rdx", "rdx", 64), ("edx", "rdx", 32), ("dx", "rdx", 16), ("dl", "rdx", 8), ("dh", "rdx", 8),
        ("rsi", "rsi", 64), ("esi", "rsi", 32), ("si", "rsi", 16), ("sil", "rsi", 8),
        ("rdi", "rdi", 64), ("edi", "rdi", 32), ("di", "rdi", 16), ("dil", "rdi", 8),
        ("rbp", "rbp", 64), ("ebp", "rbp", 32), ("bp", "rbp", 16), ("bpl", "rbp", 8),
        ("rsp", "rsp", 64), ("esp", "rsp", 32), ("sp", "rsp", 16), ("spl", "rsp", 8),
        ("rip", "rip", 64),
    ];
    if let Some(&(_, canon, width)) = TABLE.iter().find(|(n, _, _)| *n == name) {
        return Some((canon, width));
    }
    const EXTENDED: [&str; 8] = ["r8", "r9", "r10", "r11", "r12", "r13", "r14", "r15"];
    for canon in EXTENDED {
        if let Some(suffix) = name.strip_prefix(canon) {
            let width = match suffix {
                "" => 64,
                "d" => 32,
                "w" => 16,
                "b" | "l" => 8,
                _ => continue,
            };
            return Some((canon, width));
        }
    }
    None
}

fn arg_index(reg: &str) -> Option<usize> {
    ARG_REGISTERS.iter().position(|r| *r == reg)
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct MemRef {
    base: Option<&'static str>,
    index: Option<&'static str>,
    disp: i64,
}

impl MemRef {
    fn stack_slot(&self) -> Option<(&'static str, i64)> {
        match (self.base, self.index) {
            (Some(b @ ("rbp" | "rsp")), None) => Some((b, self.disp)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Operand {
    Reg { reg: &'static str, width: u8 },
    /// Non-general-purpose register (xmm, segment, ...).
    OtherReg,
    Mem(MemRef),
    Other,
}

fn parse_number(s: &str) -> Option<i64> {
    let s = s.trim();
    if let Some(hex) = s.strip_prefix("0x") {
        return i64::from_str_radix(hex, 16).ok();
    }
    if let Some(hex) = s.strip_suffix('h') {
        return i64::from_str_radix(hex, 16).ok();
    }
    s.parse().ok()
}

fn parse_memory(inner: &str) -> MemRef {
    let mut mem = MemRef {
        base: None,
        index: None,
        disp: 0,
    };
    let mut term = String::new();
    let mut sign = 1i64;
    let flush = |term: &mut String, sign: i64, mem: &mut MemRef| {
        let t = term.trim().to_string();
        term.clear();
        if t.is_empty() {
            return;
        }
        if let Some((reg, _scale)) = t.split_once('*') {
            if let Some((r, _)) = canonical_register(reg.trim()) {
                mem.index = Some(r);
            }
        } else if let Some((r, _)) = canonical_register(&t) {
            if mem.base.is_none() {
                mem.base = Some(r);
            } else {
                mem.index = Some(r);
            }
        } else if let Some(n) = parse_number(&t) {
            mem.disp = mem.disp.wrapping_add(sign.wrapping_mul(n));
        }
    };
    for ch in inner.chars() {
        match ch {
            '+' => {
                flush(&mut term, sign, &mut mem);
                sign = 1;
            }
            '-' => {
                flush(&mut term, sign, &mut mem);
                sign = -1;
            }
            c => term.push(c),
        }
    }
    flush(&mut term, sign, &mut mem);
    mem
}

fn parse_operand(raw: &str) -> Operand {
    let mut text = raw.trim().to_ascii_lowercase();
    let mut is_mem = false;
    if let Some(pos) = text.find(" ptr ") {
        text = text[pos + 5..].trim().to_string();
        is_mem = true;
    }
    if let Some(open) = text.find('[') {
        let close = text[open..].find(']').map(|c| open + c).unwrap_or(text.len());
        return Operand::Mem(parse_memory(&text[open + 1..close]));
    }
    if is_mem || text.contains(':') {
        // absolute or segment-relative memory such as `fs:0x28`
        return Operand::Mem(MemRef {
            base: None,
            index: None,
            disp: 0,
        });
    }
    if let Some((reg, width)) = canonical_register(&text) {
        return Operand::Reg { reg, width };
    }
    if text.starts_with("xmm")
        || text.starts_with("ymm")
        || text.starts_with("zmm")
        || text.starts_with("st")
        || text.starts_with('k')
            && text.len() == 2
            && text.as_bytes()[1].is_ascii_digit()
        || matches!(text.as_str(), "cs" | "ds" | "es" | "fs" | "gs" | "ss")
    {
        return Operand::OtherReg;
    }
    Operand::Other
}

/// Split operand text, returning the operands and any `<symbol>` annotation.
fn parse_operands(text: &str) -> (Vec<Operand>, Option<String>) {
    let text = text.split('#').next().unwrap_or("");
    let mut target = None;
    let mut body = text.to_string();
    if let (Some(open), Some(close)) = (text.find('<'), text.rfind('>')) {
        if open < close {
            target = Some(text[open + 1..close].trim().to_string());
            body = text[..open].to_string();
        }
    }
    let mut ops = Vec::new();
    let mut depth = 0i32;
    let mut current = String::new();
    for ch in body.chars() {
        match ch {
            '[' => {
                depth += 1;
                current.push(ch);
            }
            ']' => {
                depth -= 1;
                current.push(ch);
            }
            ',' if depth == 0 => {
                ops.push(std::mem::take(&mut current));
            }
            c => current.push(c),
        }
    }
    ops.push(current);
    let ops = ops
        .iter()
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_operand(s))
        .collect();
    (ops, target)
}

/// `None` for `sym+0x10`-style labels: they name whatever precedes the
/// target, not the callee.
fn normalize_routine(name: &str) -> Option<String> {
    if name.contains(['+', '-']) {
        return None;
    }
    let name = name.split('@').next().unwrap_or(name);
    let mut n = name.trim();
    if let Some(stripped) = n.strip_prefix("__") {
        if let Some(core) = stripped.strip_suffix("_chk") {
            n = core;
        }
    }
    Some(n.to_string())
}

fn known_routine(name: &str) -> Option<(usize, &'static [usize])> {
    let n = normalize_routine(name)?;
    KNOWN_ROUTINES
        .iter()
        .find(|(k, _, _)| *k == n)
        .map(|(_, arity, ptrs)| (*arity, *ptrs))
}

fn is_string_op(m: &str, operands: &str) -> Option<(bool, bool)> {
    // (reads rdi, reads rsi)
    let lower = m.to_ascii_lowercase();
    if matches!(lower.as_str(), "movsx" | "movsxd" | "movss" | "movsd" | "movsb" | "movsw" | "movsq")
        && !(operands.is_empty() || operands.contains("[rdi]") || operands.contains("[rsi]"))
    {
        return None;
    }
    let strip = |p: &str| {
        lower
            .strip_prefix(p)
            .map(|rest| matches!(rest, "" | "b" | "w" | "d" | "q"))
            .unwrap_or(false)
    };
    if strip("stos") || strip("scas") {
        Some((true, false))
    } else if strip("lods") {
        Some((false, true))
    } else if strip("movs") || strip("cmps") {
        Some((true, true))
    } else {
        None
    }
}

#[derive(Default)]
struct Sweep {
    range: (u64, u64),
    arity: usize,
    written: [bool; 6],
    pointer: [bool; 6],
    reg_alias: HashMap<&'static str, usize>,
    slot_alias: HashMap<(&'static str, i64), usize>,
    rax_written: bool,
    stack_args: bool,
}

impl Sweep {
    fn new(range: (u64, u64)) -> Self {
        let mut s = Sweep {
            range,
            ..Sweep::default()
        };
        for (i, r) in ARG_REGISTERS.iter().enumerate() {
            s.reg_alias.insert(r, i);
        }
        s
    }

    fn read(&mut self, reg: &str) {
        if let Some(i) = arg_index(reg) {
            if !self.written[i] {
                self.arity = self.arity.max(i + 1);
            }
        }
    }

    fn write(&mut self, reg: &'static str, alias: Option<usize>) {
        if let Some(i) = arg_index(reg) {
            self.written[i] = true;
        }
        if reg == "rax" {
            self.rax_written = true;
        }
        match alias {
            Some(p) => {
                self.reg_alias.insert(reg, p);
            }
            None => {
                self.reg_alias.remove(reg);
            }
        }
    }

    fn alias(&self, reg: &str) -> Option<usize> {
        self.reg_alias.get(reg).copied()
    }

    fn deref(&mut self, reg: &str) {
        if let Some(p) = self.alias(reg) {
            self.pointer[p] = true;
        }
    }

    fn read_operand(&mut self, op: &Operand) {
        if let Operand::Reg { reg, .. } = op {
            self.read(reg);
        }
    }

    fn write_operand(&mut self, op: &Operand, alias: Option<usize>) {
        match op {
            Operand::Reg { reg, .. } => self.write(reg, alias),
            Operand::Mem(mem) => {
                if let Some(slot) = mem.stack_slot() {
                    match alias {
                        Some(p) => {
                            self.slot_alias.insert(slot, p);
                        }
                        None => {
                            self.slot_alias.remove(&slot);
                        }
                    }
                }
            }
            _ => {}
        }
    }

    fn pass_to_routine(&mut self, target: Option<&str>) {
        let Some((arity, ptrs)) = target.and_then(known_routine) else {
            return;
        };
        for (k, reg) in ARG_REGISTERS.iter().enumerate().take(arity) {
            self.read(reg);
            if ptrs.contains(&k) {
                self.deref(reg);
            }
        }
    }

    /// Returns false once a terminator is reached.
    fn step(&mut self, mnemonic: &str, operands: &str) -> bool {
        let m = base_mnemonic(mnemonic).to_ascii_lowercase();
        if m.is_empty() || m == "nop" || m.starts_with("endbr") || m.starts_with("prefetch") {
            return true;
        }
        if matches!(m.as_str(), "ret" | "retq" | "retn" | "hlt" | "ud2" | "int3") {
            return false;
        }

        if let Some((rdi, rsi)) = is_string_op(&m, operands) {
            if rdi {
                self.read("rdi");
                self.deref("rdi");
                let a = self.alias("rdi");
                self.write("rdi", a);
            }
            if rsi {
                self.read("rsi");
                self.deref("rsi");
                let a = self.alias("rsi");
                self.write("rsi", a);
            }
            if has_rep_prefix(mnemonic) {
                self.read("rcx");
                self.write("rcx", None);
            }
            return true;
        }

        let (ops, target) = parse_operands(operands);

        for op in &ops {
            if let Operand::Mem(mem) = op {
                if let Some(b) = mem.base {
                    self.read(b);
                    if m != "lea" {
                        self.deref(b);
                    }
                    if b == "rbp" && mem.index.is_none() && mem.disp >= 0x10 {
                        self.stack_args = true;
                    }
                }
                if let Some(i) = mem.index {
                    self.read(i);
                }
            }
        }

        match m.as_str() {
            "jmp" => {
                ops.iter().for_each(|o| self.read_operand(o));
                if let Some(dest) = branch_target(operands) {
                    if dest >= self.range.0 && dest < self.range.1 {
                        return true;
                    }
                }
                self.pass_to_routine(target.as_deref());
                return false;
            }
            "call" => {
                ops.iter().for_each(|o| self.read_operand(o));
                self.pass_to_routine(target.as_deref());
                for r in CALLER_SAVED {
                    self.write(r, None);
                }
                return true;
            }
            _ => {}
        }

        if matches!(m.as_str(), "xor" | "sub" | "sbb" | "pxor" | "xorps" | "xorpd") {
            if let [Operand::Reg { reg: a, .. }, Operand::Reg { reg: b, .. }] = ops.as_slice() {
                if a == b {
                    self.write(a, None);
                    return true;
                }
            }
        }

        match m.as_str() {
            "cqo" | "cdq" | "cwd" | "cqto" | "cltd" => {
                self.read("rax");
                self.write("rdx", None);
            }
            "cdqe" | "cwde" | "cbw" | "cltq" => {
                self.read("rax");
                self.write("rax", None);
            }
            "mul" | "div" | "idiv" => {
                ops.iter().for_each(|o| self.read_operand(o));
                self.read("rax");
                if m != "mul" {
                    self.read("rdx");
                }
                self.write("rax", None);
                self.write("rdx", None);
            }
            "imul" if ops.len() == 1 => {
                ops.iter().for_each(|o| self.read_operand(o));
                self.read("rax");
                self.write("rax", None);
                self.write("rdx", None);
            }
            "push" => ops.iter().for_each(|o| self.read_operand(o)),
            "pop" => {
                if let Some(dst) = ops.first() {
                    self.write_operand(dst, None);
                }
            }
            "leave" | "leaveq" => {}
            "xchg" | "xadd" => {
                ops.iter().for_each(|o| self.read_operand(o));
                if let [a, b] = ops.as_slice() {
                    let alias_of = |s: &Sweep, op: &Operand| match op {
                        Operand::Reg { reg, width: 64 } => s.alias(reg),
                        _ => None,
                    };
                    let (aa, ab) = (alias_of(self, a), alias_of(self, b));
                    if m == "xchg" {
                        self.write_operand(a, ab);
                        self.write_operand(b, aa);
                    } else {
                        self.write_operand(a, None);
                        self.write_operand(b, aa);
                    }
                }
            }
            _ if is_write_only(&m, ops.len()) => {
                let Some((dst, srcs)) = ops.split_first() else {
                    return true;
                };
                srcs.iter().for_each(|o| self.read_operand(o));
                let alias = self.propagated_alias(&m, dst, srcs);
                self.write_operand(dst, alias);
            }
            _ if is_read_write(&m) => {
                ops.iter().for_each(|o| self.read_operand(o));
                if let Some(dst) = ops.first() {
                    // pointer arithmetic keeps provenance
                    let keep = matches!(m.as_str(), "add" | "sub")
                        && matches!(dst, Operand::Reg { width: 64, .. });
                    let alias = match dst {
                        Operand::Reg { reg, .. } if keep => self.alias(reg),
                        _ => None,
                    };
                    self.write_operand(dst, alias);
                }
            }
            _ => ops.iter().for_each(|o| self.read_operand(o)),
        }
        true
    }

    fn propagated_alias(&self, m: &str, dst: &Operand, srcs: &[Operand]) -> Option<usize> {
        let dst_is_64 = match dst {
            Operand::Reg { width, .. } => *width == 64,
            Operand::Mem(_) => true,
            _ => false,
        };
        if !dst_is_64 {
            return None;
        }
        match (m, srcs) {
            ("mov" | "movabs", [Operand::Reg { reg, width: 64 }]) => self.alias(reg),
            ("mov", [Operand::Mem(mem)]) if matches!(dst, Operand::Reg { .. }) => {
                mem.stack_slot().and_then(|s| self.slot_alias.get(&s).copied())
            }
            ("lea", [Operand::Mem(mem)]) => mem.base.and_then(|b| self.alias(b)),
            _ => None,
        }
    }

    fn finish(self, name: &str, empty: bool) -> InferredSignature {
        let params = (0..self.arity)
            .map(|i| {
                if self.pointer[i] {
                    TypeClass::PtrOpaque
                } else {
                    TypeClass::Int64
                }
            })
            .collect::<Vec<_>>();
        let confidence = if empty || (self.arity == ARG_REGISTERS.len() && self.stack_args) {
            Confidence::Defaulted
        } else {
            Confidence::Derived
        };
        InferredSignature {
            function_name: name.to_string(),
            return_class: if self.rax_written {
                TypeClass::Int64
            } else {
                TypeClass::Void
            },
            params,
            confidence,
        }
    }
}

/// Direct branch destination. objdump prints bare hex, other tools `0x`.
fn branch_target(operands: &str) -> Option<u64> {
    let text = operands.split(['<', '#']).next()?.trim();
    let text = text
        .strip_prefix("short ")
        .or_else(|| text.strip_prefix("near "))
        .unwrap_or(text)
        .trim();
    if text.is_empty() || text.contains('[') || canonical_register(text).is_some() {
        return None;
    }
    let hex = text.trim_start_matches("0x").trim_end_matches('h');
    u64::from_str_radix(hex, 16).ok()
}

fn is_write_only(m: &str, nops: usize) -> bool {
    matches!(
        m,
        "mov" | "movabs" | "movzx" | "movsx" | "movsxd" | "movq" | "movd" | "lea" | "bsf" | "bsr"
            | "popcnt" | "lzcnt" | "tzcnt" | "movaps" | "movups" | "movdqa" | "movdqu" | "movss"
            | "movsd" | "movapd" | "movupd"
    ) || m.starts_with("set")
        || m.starts_with("cvt")
        || (m == "imul" && nops == 3)
}

fn is_read_write(m: &str) -> bool {
    matches!(
        m,
        "add" | "sub" | "and" | "or" | "xor" | "adc" | "sbb" | "imul" | "shl" | "shr" | "sar"
            | "sal" | "rol" | "ror" | "rcl" | "rcr" | "inc" | "dec" | "neg" | "not" | "bswap"
            | "shld" | "shrd" | "andn"
    ) || m.starts_with("cmov")
}

pub fn infer_from_disassembly(disasm: &Disassembly) -> InferredSignature {
    let start = disasm.instructions.first().map(|i| i.address).unwrap_or(0);
    let end = disasm
        .instructions
        .last()
        .map(|i| (i.address + 1).max(start + disasm.byte_length))
        .unwrap_or(start);
    let mut sweep = Sweep::new((start, end));
    for insn in &disasm.instructions {
        if !sweep.step(&insn.mnemonic, &insn.operands) {
            break;
        }
    }
    sweep.finish(&disasm.function_name, disasm.instructions.is_empty())
}
