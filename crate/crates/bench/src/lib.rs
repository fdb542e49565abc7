//! Inputs shared by the benchmarks.

use soforge_core::disasm::Instruction;
use soforge_core::forge::{ExitStatusInfo, Verdict};
use soforge_core::ledger::{CompileSummary, ExecSummary};
use soforge_core::{Disassembly, DriverAttempt, RunLedger};

/// `functions` entries with `per_function` attempts each, the last nominal.
pub fn ledger(functions: usize, per_function: u32) -> RunLedger {
    let names: Vec<String> = (0..functions).map(|i| format!("fn_{i}")).collect();
    let mut ledger = RunLedger::new("libbench.so", "bench", names.clone(), "");
    for name in &names {
        for k in 1..=per_function {
            let nominal = k == per_function;
            ledger
                .apply_attempt(DriverAttempt {
                    function_name: name.clone(),
                    attempt_index: k,
                    source_path: None,
                    compile: CompileSummary {
                        success: nominal,
                        duration: 0.5,
                        timed_out: false,
                        stderr_bytes: 0,
                    },
                    exec: nominal.then_some(ExecSummary {
                        verdict: Verdict::Nominal,
                        exit_status: ExitStatusInfo::Killed,
                        wall_time: 10.0,
                        crash_artifact: None,
                    }),
                    timestamp: chrono::Utc::now(),
                })
                .expect("ascending attempts");
        }
    }
    ledger
}

/// A frame-pointer function of `body` instructions that spills and reloads
/// three arguments.
pub fn disassembly(body: usize) -> Disassembly {
    let mut rows: Vec<(&str, String)> = vec![
        ("push", "rbp".into()),
        ("mov", "rbp,rsp".into()),
        ("mov", "QWORD PTR [rbp-0x8],rdi".into()),
        ("mov", "QWORD PTR [rbp-0x10],rsi".into()),
        ("mov", "DWORD PTR [rbp-0x14],edx".into()),
    ];
    for i in 0..body {
        rows.push(("mov", "rax,QWORD PTR [rbp-0x8]".into()));
        rows.push(("movzx", format!("eax,BYTE PTR [rax+{:#x}]", i % 64)));
        rows.push(("add", "DWORD PTR [rbp-0x14],eax".into()));
    }
    rows.push(("mov", "eax,DWORD PTR [rbp-0x14]".into()));
    rows.push(("pop", "rbp".into()));
    rows.push(("ret", String::new()));
    Disassembly {
        function_name: "bench".into(),
        instructions: rows
            .into_iter()
            .enumerate()
            .map(|(i, (m, o))| Instruction {
                address: 0x1000 + 4 * i as u64,
                mnemonic: m.into(),
                operands: o,
            })
            .collect(),
        byte_length: 0,
    }
}
