//! Export enumeration and fuzzability verdicts (phase 0).

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::disasm::{DisasmError, InferredSignature};
use crate::elf::{BinaryImage, SymbolBinding, SymbolType, SHN_UNDEF};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Binding {
    Global,
    Weak,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ExclusionReason {
    ZeroArity,
    DenylistPattern,
    NotFunction,
    Undefined,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportedFunction {
    pub name: String,
    pub address: u64,
    pub binding: Binding,
    pub fuzzable: bool,
    pub exclusion_reason: Option<ExclusionReason>,
}

impl ExportedFunction {
    pub fn new(name: impl Into<String>, address: u64, binding: Binding) -> Self {
        Self {
            name: name.into(),
            address,
            binding,
            fuzzable: false,
            exclusion_reason: None,
        }
    }

    fn mark(&mut self, verdict: Result<(), ExclusionReason>) {
        match verdict {
            Ok(()) => {
                self.fuzzable = true;
                self.exclusion_reason = None;
            }
            Err(reason) => {
                self.fuzzable = false;
                self.exclusion_reason = Some(reason);
            }
        }
    }
}

/// Defined GLOBAL/WEAK `FUNC` symbols from `.dynsym`, one per name, sorted by
/// address then name. Repeated names keep the first definition in table order.
pub fn list_exports(image: &BinaryImage) -> Vec<ExportedFunction> {
    let (mut kept, _) = partition_exports(image);
    kept.sort_by(|a, b| a.address.cmp(&b.address).then_with(|| a.name.cmp(&b.name)));
    kept
}

/// Later definitions of an already-exported name, marked `NOT_FUNCTION`.
pub fn duplicate_exports(image: &BinaryImage) -> Vec<ExportedFunction> {
    partition_exports(image).1
}

fn partition_exports(image: &BinaryImage) -> (Vec<ExportedFunction>, Vec<ExportedFunction>) {
    let mut seen = HashSet::new();
    let mut kept = Vec::new();
    let mut dups = Vec::new();
    for sym in &image.dynamic_symbols {
        if sym.kind != SymbolType::Func || sym.section_index == SHN_UNDEF || sym.name.is_empty() {
            continue;
        }
        let binding = match sym.binding {
            SymbolBinding::Global => Binding::Global,
            SymbolBinding::Weak => Binding::Weak,
            _ => continue,
        };
        let mut f = ExportedFunction::new(sym.name.clone(), sym.value, binding);
        if seen.insert(sym.name.clone()) {
            kept.push(f);
        } else {
            f.mark(Err(ExclusionReason::NotFunction));
            dups.push(f);
        }
    }
    (kept, dups)
}

/// Shell-style name patterns (`*` and `?`) that exclude an export outright.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Denylist {
    patterns: Vec<String>,
}

impl Default for Denylist {
    fn default() -> Self {
        Self::new(["_init", "_fini", "__*"])
    }
}

impl Denylist {
    pub fn new<I, S>(patterns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            patterns: patterns.into_iter().map(Into::into).collect(),
        }
    }

    pub fn patterns(&self) -> &[String] {
        &self.patterns
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| glob_match(p.as_bytes(), name.as_bytes()))
    }
}

fn glob_match(pattern: &[u8], text: &[u8]) -> bool {
    let (mut p, mut t) = (0, 0);
    let mut star: Option<(usize, usize)> = None;
    while t < text.len() {
        if p < pattern.len() && (pattern[p] == b'?' || pattern[p] == text[t]) {
            p += 1;
            t += 1;
        } else if p < pattern.len() && pattern[p] == b'*' {
            star = Some((p, t));
            p += 1;
        } else if let Some((sp, st)) = star {
            p = sp + 1;
            t = st + 1;
            star = Some((sp, st + 1));
        } else {
            return false;
        }
    }
    pattern[p..].iter().all(|&c| c == b'*')
}

/// An export together with whatever the signature provider said about it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedExport {
    pub function: ExportedFunction,
    pub signature: Option<InferredSignature>,
    pub provider_error: Option<String>,
}

/// Annotate every export with a verdict; nothing is dropped. Provider failures
/// exclude the function as `NOT_FUNCTION` and classification continues.
pub fn classify_exports<F>(
    exports: Vec<ExportedFunction>,
    denylist: &Denylist,
    mut infer: F,
) -> Vec<ClassifiedExport>
where
    F: FnMut(&ExportedFunction) -> Result<InferredSignature, DisasmError>,
{
    exports
        .into_iter()
        .map(|mut function| {
            if denylist.matches(&function.name) {
                function.mark(Err(ExclusionReason::DenylistPattern));
                return ClassifiedExport {
                    function,
                    signature: None,
                    provider_error: None,
                };
            }
            match infer(&function) {
                Ok(sig) => {
                    let verdict = if sig.params.is_empty() {
                        Err(ExclusionReason::ZeroArity)
                    } else {
                        Ok(())
                    };
                    function.mark(verdict);
                    ClassifiedExport {
                        function,
                        signature: Some(sig),
                        provider_error: None,
                    }
                }
                Err(e) => {
                    function.mark(Err(ExclusionReason::NotFunction));
                    ClassifiedExport {
                        function,
                        signature: None,
                        provider_error: Some(e.to_string()),
                    }
                }
            }
        })
        .collect()
}

pub fn filter_fuzzable<F>(
    exports: Vec<ExportedFunction>,
    denylist: &Denylist,
    infer: F,
) -> Vec<ExportedFunction>
where
    F: FnMut(&ExportedFunction) -> Result<InferredSignature, DisasmError>,
{
    classify_exports(exports, denylist, infer)
        .into_iter()
        .map(|c| c.function)
        .collect()
}
