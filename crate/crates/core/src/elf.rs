//! Read-only ELF64 parsing: section headers, `.dynsym`/`.dynstr`, and the
//! PLT relocation slots used to name imported call targets.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

const ELF_MAGIC: [u8; 4] = [0x7f, b'E', b'L', b'F'];
const ELFCLASS64: u8 = 2;
const ELFDATA2LSB: u8 = 1;
const EM_X86_64: u16 = 62;

const EHDR_SIZE: usize = 64;
const SHDR_SIZE: usize = 64;
const SYM_SIZE: usize = 24;
const RELA_SIZE: usize = 24;

pub const SHT_NOBITS: u32 = 8;
pub const SHT_DYNSYM: u32 = 11;
pub const SHT_RELA: u32 = 4;

pub const SHF_ALLOC: u64 = 0x2;
pub const SHF_EXECINSTR: u64 = 0x4;

pub const SHN_UNDEF: u16 = 0;
pub const SHN_LORESERVE: u16 = 0xff00;

const R_X86_64_JUMP_SLOT: u32 = 7;
const R_X86_64_GLOB_DAT: u32 = 6;

#[derive(Debug, Error)]
pub enum ElfError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("not an ELF file (bad magic)")]
    NotElf,
    #[error("unsupported ELF class {0} (only ELF64 is supported)")]
    UnsupportedClass(u8),
    #[error("unsupported data encoding {0} (only little-endian is supported)")]
    UnsupportedEncoding(u8),
    #[error("no .dynsym section present")]
    NoDynsym,
    #[error("truncated image: {0}")]
    Truncated(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElfFormat {
    Elf64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Machine {
    Amd64,
    Other(u16),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub name: String,
    pub kind: u32,
    pub flags: u64,
    pub addr: u64,
    pub offset: u64,
    pub size: u64,
    pub link: u32,
    pub entsize: u64,
}

impl Section {
    pub fn is_executable(&self) -> bool {
        self.flags & SHF_EXECINSTR != 0
    }

    pub fn contains_addr(&self, addr: u64) -> bool {
        self.flags & SHF_ALLOC != 0 && addr >= self.addr && addr < self.addr.saturating_add(self.size)
    }

    pub fn end_addr(&self) -> u64 {
        self.addr.saturating_add(self.size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolType {
    NoType,
    Object,
    Func,
    Section,
    File,
    Tls,
    GnuIfunc,
    Other(u8),
}

impl From<u8> for SymbolType {
    fn from(v: u8) -> Self {
        match v {
            0 => Self::NoType,
            1 => Self::Object,
            2 => Self::Func,
            3 => Self::Section,
            4 => Self::File,
            6 => Self::Tls,
            10 => Self::GnuIfunc,
            other => Self::Other(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SymbolBinding {
    Local,
    Global,
    Weak,
    Other(u8),
}

impl From<u8> for SymbolBinding {
    fn from(v: u8) -> Self {
        match v {
            0 => Self::Local,
            1 => Self::Global,
            2 => Self::Weak,
            other => Self::Other(other),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Visibility {
    Default,
    Internal,
    Hidden,
    Protected,
}

impl From<u8> for Visibility {
    fn from(v: u8) -> Self {
        match v & 0x3 {
            0 => Self::Default,
            1 => Self::Internal,
            2 => Self::Hidden,
            _ => Self::Protected,
        }
    }
}

/// One decoded `.dynsym` entry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawSymbol {
    pub name: String,
    pub value: u64,
    pub size: u64,
    pub kind: SymbolType,
    pub binding: SymbolBinding,
    pub visibility: Visibility,
    pub section_index: u16,
}

impl RawSymbol {
    pub fn is_defined(&self) -> bool {
        self.section_index != SHN_UNDEF
    }
}

/// A parsed shared object. Immutable after [`load_binary`]; share it behind
/// an `Arc` when sessions run concurrently.
#[derive(Clone, PartialEq, Eq)]
pub struct BinaryImage {
    pub path: PathBuf,
    pub format: ElfFormat,
    pub machine: Machine,
    pub sections: Vec<Section>,
    pub dynamic_symbols: Vec<RawSymbol>,
    /// GOT slot address -> imported symbol name, from `.rela.plt`/`.rela.dyn`.
    pub got_imports: Vec<(u64, String)>,
    data: Vec<u8>,
}

impl fmt::Debug for BinaryImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("BinaryImage")
            .field("path", &self.path)
            .field("machine", &self.machine)
            .field("sections", &self.sections.len())
            .field("dynamic_symbols", &self.dynamic_symbols.len())
            .finish()
    }
}

impl BinaryImage {
    pub fn file_name(&self) -> String {
        self.path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default()
    }

    pub fn section_by_name(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn section_for_addr(&self, addr: u64) -> Option<&Section> {
        self.sections.iter().find(|s| s.contains_addr(addr))
    }

    /// File bytes backing `[addr, addr + len)`, clipped to the containing section.
    pub fn bytes_at(&self, addr: u64, len: u64) -> Option<&[u8]> {
        let sec = self.section_for_addr(addr)?;
        if sec.kind == SHT_NOBITS {
            return None;
        }
        let avail = sec.end_addr() - addr;
        let len = len.min(avail);
        let start = sec.offset.checked_add(addr - sec.addr)? as usize;
        let end = start.checked_add(len as usize)?;
        self.data.get(start..end)
    }

    pub fn raw_bytes(&self) -> &[u8] {
        &self.data
    }
}

struct Reader<'a> {
    data: &'a [u8],
}

impl<'a> Reader<'a> {
    fn slice(&self, off: u64, len: u64, what: &str) -> Result<&'a [u8], ElfError> {
        let start = usize::try_from(off).map_err(|_| trunc(what, off, len))?;
        let len_usize = usize::try_from(len).map_err(|_| trunc(what, off, len))?;
        let end = start.checked_add(len_usize).ok_or_else(|| trunc(what, off, len))?;
        self.data.get(start..end).ok_or_else(|| trunc(what, off, len))
    }

    fn u16(&self, off: u64, what: &str) -> Result<u16, ElfError> {
        let b = self.slice(off, 2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&self, off: u64, what: &str) -> Result<u32, ElfError> {
        let b = self.slice(off, 4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&self, off: u64, what: &str) -> Result<u64, ElfError> {
        let b = self.slice(off, 8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

fn trunc(what: &str, off: u64, len: u64) -> ElfError {
    ElfError::Truncated(format!("{what} at offset {off:#x} (+{len:#x}) lies outside the file"))
}

fn c_string(table: &[u8], off: u32, what: &str) -> Result<String, ElfError> {
    let start = off as usize;
    if start >= table.len() {
        return Err(ElfError::Truncated(format!(
            "{what} name offset {off:#x} outside string table of {} bytes",
            table.len()
        )));
    }
    let rest = &table[start..];
    let end = rest.iter().position(|&b| b == 0).ok_or_else(|| {
        ElfError::Truncated(format!("{what} name at {off:#x} is not NUL-terminated"))
    })?;
    Ok(String::from_utf8_lossy(&rest[..end]).into_owned())
}

/// Load and parse an ELF64 shared object. The file is only read.
pub fn load_binary(path: impl AsRef<Path>) -> Result<BinaryImage, ElfError> {
    let path = path.as_ref();
    let data = fs::read(path).map_err(|source| ElfError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    parse_binary(path.to_path_buf(), data)
}

pub fn parse_binary(path: PathBuf, data: Vec<u8>) -> Result<BinaryImage, ElfError> {
    if data.len() < 4 || data[..4] != ELF_MAGIC {
        return Err(ElfError::NotElf);
    }
    if data.len() < EHDR_SIZE {
        return Err(ElfError::Truncated("ELF header".into()));
    }
    if data[4] != ELFCLASS64 {
        return Err(ElfError::UnsupportedClass(data[4]));
    }
    if data[5] != ELFDATA2LSB {
        return Err(ElfError::UnsupportedEncoding(data[5]));
    }

    let r = Reader { data: &data };
    let machine = match r.u16(0x12, "e_machine")? {
        EM_X86_64 => Machine::Amd64,
        other => Machine::Other(other),
    };
    let shoff = r.u64(0x28, "e_shoff")?;
    let shentsize = r.u16(0x3a, "e_shentsize")? as u64;
    let shnum = r.u16(0x3c, "e_shnum")? as u64;
    let shstrndx = r.u16(0x3e, "e_shstrndx")? as u64;

    if shnum == 0 {
        return Err(ElfError::NoDynsym);
    }
    if shentsize as usize != SHDR_SIZE {
        return Err(ElfError::Truncated(format!("unexpected section header size {shentsize}")));
    }

    struct RawShdr {
        name: u32,
        kind: u32,
        flags: u64,
        addr: u64,
        offset: u64,
        size: u64,
        link: u32,
        entsize: u64,
    }

    let mut raw = Vec::with_capacity(shnum as usize);
    for i in 0..shnum {
        let base = shoff
            .checked_add(i * shentsize)
            .ok_or_else(|| trunc("section header", shoff, shentsize))?;
        r.slice(base, shentsize, "section header")?;
        raw.push(RawShdr {
            name: r.u32(base, "sh_name")?,
            kind: r.u32(base + 4, "sh_type")?,
            flags: r.u64(base + 8, "sh_flags")?,
            addr: r.u64(base + 16, "sh_addr")?,
            offset: r.u64(base + 24, "sh_offset")?,
            size: r.u64(base + 32, "sh_size")?,
            link: r.u32(base + 40, "sh_link")?,
            entsize: r.u64(base + 56, "sh_entsize")?,
        });
    }

    let shstr = raw
        .get(shstrndx as usize)
        .map(|s| r.slice(s.offset, s.size, "section name table"))
        .transpose()?
        .unwrap_or(&[]);

    let mut sections = Vec::with_capacity(raw.len());
    for s in &raw {
        let name = if shstr.is_empty() {
            String::new()
        } else {
            c_string(shstr, s.name, "section")?
        };
        if s.kind != SHT_NOBITS {
            r.slice(s.offset, s.size, &format!("section {name}"))?;
        }
        sections.push(Section {
            name,
            kind: s.kind,
            flags: s.flags,
            addr: s.addr,
            offset: s.offset,
            size: s.size,
            link: s.link,
            entsize: s.entsize,
        });
    }

    let dynsym_index = sections
        .iter()
        .position(|s| s.kind == SHT_DYNSYM)
        .ok_or(ElfError::NoDynsym)?;
    let dynsym_symbols = read_symbols(&r, &sections, dynsym_index)?;

    for sym in &dynsym_symbols {
        // TLS symbol values are offsets into the thread-local block
        if sym.is_defined() && sym.section_index < SHN_LORESERVE && sym.kind != SymbolType::Tls {
            let Some(sec) = sections.get(sym.section_index as usize) else {
                return Err(ElfError::Truncated(format!(
                    "symbol {} refers to missing section {}",
                    sym.name, sym.section_index
                )));
            };
            let in_range = sym.value >= sec.addr && sym.value <= sec.end_addr();
            if sec.flags & SHF_ALLOC != 0 && !in_range {
                return Err(ElfError::Truncated(format!(
                    "symbol {} at {:#x} lies outside section {}",
                    sym.name, sym.value, sec.name
                )));
            }
        }
    }

    let got_imports = read_got_imports(&r, &sections, dynsym_index, &dynsym_symbols)?;

    Ok(BinaryImage {
        path,
        format: ElfFormat::Elf64,
        machine,
        sections,
        dynamic_symbols: dynsym_symbols,
        got_imports,
        data,
    })
}

fn read_symbols(
    r: &Reader<'_>,
    sections: &[Section],
    index: usize,
) -> Result<Vec<RawSymbol>, ElfError> {
    let symtab = &sections[index];
    let strtab = sections.get(symtab.link as usize).ok_or_else(|| {
        ElfError::Truncated(format!("{} links to missing string table", symtab.name))
    })?;
    let strings = r.slice(strtab.offset, strtab.size, "dynamic string table")?;
    let bytes = r.slice(symtab.offset, symtab.size, "dynamic symbol table")?;

    let count = bytes.len() / SYM_SIZE;
    let mut out = Vec::with_capacity(count);
    for chunk in bytes.chunks_exact(SYM_SIZE) {
        let name_off = u32::from_le_bytes(chunk[0..4].try_into().expect("4"));
        let info = chunk[4];
        let other = chunk[5];
        let shndx = u16::from_le_bytes(chunk[6..8].try_into().expect("2"));
        let value = u64::from_le_bytes(chunk[8..16].try_into().expect("8"));
        let size = u64::from_le_bytes(chunk[16..24].try_into().expect("8"));
        out.push(RawSymbol {
            name: c_string(strings, name_off, "symbol")?,
            value,
            size,
            kind: SymbolType::from(info & 0xf),
            binding: SymbolBinding::from(info >> 4),
            visibility: Visibility::from(other),
            section_index: shndx,
        });
    }
    Ok(out)
}

fn read_got_imports(
    r: &Reader<'_>,
    sections: &[Section],
    dynsym_index: usize,
    symbols: &[RawSymbol],
) -> Result<Vec<(u64, String)>, ElfError> {
    let mut out = Vec::new();
    for sec in sections {
        if sec.kind != SHT_RELA || sec.link as usize != dynsym_index {
            continue;
        }
        let bytes = r.slice(sec.offset, sec.size, "relocation table")?;
        for chunk in bytes.chunks_exact(RELA_SIZE) {
            let offset = u64::from_le_bytes(chunk[0..8].try_into().expect("8"));
            let info = u64::from_le_bytes(chunk[8..16].try_into().expect("8"));
            let kind = (info & 0xffff_ffff) as u32;
            let sym = (info >> 32) as usize;
            if kind != R_X86_64_JUMP_SLOT && kind != R_X86_64_GLOB_DAT {
                continue;
            }
            if let Some(s) = symbols.get(sym).filter(|s| !s.name.is_empty()) {
                out.push((offset, s.name.clone()));
            }
        }
    }
    out.sort();
    Ok(out)
}
