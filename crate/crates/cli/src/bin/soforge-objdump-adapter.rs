//! Disassembler adapter backed by GNU objdump. Speaks the JSON-line protocol
//! on stdin/stdout; set `SOFORGE_OBJDUMP` to use another objdump binary.

use std::io::{BufRead, Write};
use std::process::Command;

use soforge_core::disasm::objdump::{objdump_args, parse_listing};
use soforge_core::disasm::{AdapterRequest, AdapterResponse};

fn failure(msg: String) -> AdapterResponse {
    AdapterResponse {
        ok: false,
        instructions: Vec::new(),
        error: Some(msg),
    }
}

fn handle(objdump: &str, line: &str) -> AdapterResponse {
    let req: AdapterRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => return failure(format!("bad request: {e}")),
    };
    if req.op != "disasm" {
        return failure(format!("unsupported op {:?}", req.op));
    }
    let out = match Command::new(objdump)
        .args(objdump_args(&req.path, req.address, req.address + req.length))
        .output()
    {
        Ok(o) => o,
        Err(e) => return failure(format!("{objdump}: {e}")),
    };
    if !out.status.success() {
        return failure(format!("objdump failed: {}", String::from_utf8_lossy(&out.stderr).trim()));
    }
    match parse_listing(&String::from_utf8_lossy(&out.stdout)) {
        Ok(instructions) => AdapterResponse {
            ok: true,
            instructions,
            error: None,
        },
        Err(e) => failure(e.to_string()),
    }
}

fn main() {
    let objdump = std::env::var("SOFORGE_OBJDUMP").unwrap_or_else(|_| "objdump".into());
    let stdin = std::io::stdin();
    let mut stdout = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let Ok(line) = line else { break };
        if line.trim().is_empty() {
            continue;
        }
        let resp = handle(&objdump, &line);
        let text = serde_json::to_string(&resp).expect("response serializes");
        if writeln!(stdout, "{text}").and_then(|_| stdout.flush()).is_err() {
            break;
        }
    }
}
