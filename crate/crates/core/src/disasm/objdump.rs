//! Parsing of `objdump -d -M intel --no-show-raw-insn` listings, used by the
//! bundled adapter.

use super::{DisasmError, Instruction};

const PREFIXES: &[&str] = &[
    "rep", "repe", "repz", "repne", "repnz", "lock", "bnd", "notrack", "data16", "addr32", "cs", "ds", "es",
    "fs", "gs", "ss",
];

/// Command line for one address range.
pub fn objdump_args(path: &str, start: u64, end: u64) -> Vec<String> {
    vec![
        "-d".into(),
        "-M".into(),
        "intel".into(),
        "--no-show-raw-insn".into(),
        format!("--start-address={start:#x}"),
        format!("--stop-address={end:#x}"),
        path.into(),
    ]
}

/// Instruction lines of a listing. Labels, headers and blank lines are
/// skipped; `(bad)` is a decode failure.
pub fn parse_listing(text: &str) -> Result<Vec<Instruction>, DisasmError> {
    let mut out = Vec::new();
    for line in text.lines() {
        let Some((addr, rest)) = line.split_once(":\t") else {
            continue;
        };
        let addr = addr.trim();
        let Ok(address) = u64::from_str_radix(addr, 16) else {
            continue;
        };
        let body = rest.trim();
        if body.is_empty() || body == "..." {
            continue;
        }
        if body.starts_with("(bad)") {
            return Err(DisasmError::DecodeFailure(format!("objdump could not decode {address:#x}")));
        }
        let mut tokens = body.split_whitespace().peekable();
        let mut mnemonic = Vec::new();
        while let Some(tok) = tokens.next() {
            mnemonic.push(tok);
            let is_prefix = PREFIXES.contains(&tok) && tokens.peek().is_some_and(|t| !t.contains(','));
            if !is_prefix {
                break;
            }
        }
        let operands = tokens.collect::<Vec<_>>().join(" ");
        out.push(Instruction {
            address,
            mnemonic: mnemonic.join(" "),
            operands,
        });
    }
    Ok(out)
}
