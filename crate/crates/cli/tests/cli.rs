#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use common::require_fixtures;
use soforge_core::analysis::list_exports;
use soforge_core::disasm::{infer_signature, BuiltinDecoder, ExternalAdapter};
use soforge_core::ledger::SessionStatus;
use soforge_core::{load_binary, RunLedger};

const SOFORGE: &str = env!("CARGO_BIN_EXE_soforge");
const ADAPTER: &str = env!("CARGO_BIN_EXE_soforge-objdump-adapter");

fn soforge(args: &[&str]) -> Output {
    Command::new(SOFORGE)
        .args(args)
        .env_remove("SOFORGE_DISASM_CMD")
        .output()
        .expect("spawn soforge")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes a scripted-backend config for `library` under `dir`.
fn scripted_config(dir: &Path, library: &Path, rules: &str, extra: &str) -> PathBuf {
    std::fs::create_dir_all(dir).unwrap();
    std::fs::write(dir.join("rules.json"), rules).unwrap();
    let text = format!(
        "library_path = {lib:?}\nworkspace = \"work\"\nbackend = \"scripted\"\nparallelism = 5\n{extra}\n\
[backend_params]\nrules = \"rules.json\"\n\n[budgets]\nsmoke_run_seconds = 2\nrate_budget = 6000\n",
        lib = library.to_string_lossy()
    );
    let path = dir.join("soforge.toml");
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn analyze_lists_exports_with_verdicts() {
    let fx = require_fixtures!();
    let lib = fx.basic().stripped.to_string_lossy().into_owned();
    let out = soforge(&["analyze", &lib]);
    assert_eq!(code(&out), 0);
    let text = stdout(&out);
    for e in &fx.basic().spec.expected_exports {
        let line = text.lines().find(|l| l.starts_with(&format!("{} ", e.name))).unwrap();
        assert_eq!(line.contains("FUZZABLE"), e.fuzzable, "{line}");
    }
    assert!(text.contains("6 exports, 5 fuzzable"));
    assert!(text.contains("ZERO_ARITY"));
}

#[test]
fn analyze_json_is_machine_readable() {
    let fx = require_fixtures!();
    let lib = fx.ext().unstripped.to_string_lossy().into_owned();
    let out = soforge(&["analyze", "--json", &lib]);
    assert_eq!(code(&out), 0);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["library"], "libfixture_ext.so");
    let exports = v["exports"].as_array().unwrap();
    assert_eq!(exports.len(), fx.ext().spec.expected_exports.len());
    let sum7 = exports.iter().find(|e| e["function"]["name"] == "sum7").unwrap();
    assert_eq!(sum7["signature"]["params"].as_array().unwrap().len(), 6);
    assert_eq!(sum7["signature"]["confidence"], "DEFAULTED");
    let internal = exports.iter().find(|e| e["function"]["name"] == "__internal_reset").unwrap();
    assert_eq!(internal["function"]["exclusion_reason"], "DENYLIST_PATTERN");
}

#[test]
fn analyze_rejects_bad_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let junk = tmp.path().join("junk.so");
    std::fs::write(&junk, b"definitely not an object file").unwrap();
    assert_eq!(code(&soforge(&["analyze", junk.to_str().unwrap()])), 2);
    assert_eq!(code(&soforge(&["analyze", tmp.path().join("absent.so").to_str().unwrap()])), 2);

    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "parallelism = 0\nlibrary_path = \"x.so\"\n").unwrap();
    assert_eq!(code(&soforge(&["--config", cfg.to_str().unwrap(), "analyze"])), 3);
    std::fs::write(&cfg, "no_such_key = 1\n").unwrap();
    assert_eq!(code(&soforge(&["--config", cfg.to_str().unwrap(), "analyze"])), 3);
    assert_eq!(code(&soforge(&["analyze"])), 3);
}

#[test]
fn unusable_adapter_is_config_error() {
    let fx = require_fixtures!();
    let out = Command::new(SOFORGE)
        .args(["analyze", fx.basic().unstripped.to_str().unwrap()])
        .env("SOFORGE_DISASM_CMD", "/nonexistent/disassembler")
        .output()
        .unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn builtin_and_objdump_adapter_agree() {
    let fx = require_fixtures!();
    if !common::tool_available("objdump") {
        eprintln!("SKIP: objdump missing");
        return;
    }
    let builtin = BuiltinDecoder::new();
    let adapter = ExternalAdapter::new(vec![ADAPTER.into()]).unwrap();
    for built in &fx.built {
        for path in built.variants() {
            let image = load_binary(path).unwrap();
            for f in list_exports(&image) {
                let a = infer_signature(&builtin, &image, &f).unwrap();
                let b = infer_signature(&adapter, &image, &f).unwrap();
                assert_eq!(a, b, "{} in {}", f.name, path.display());
            }
        }
    }
}

#[test]
fn run_happy_path_exits_zero() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scripted_config(tmp.path(), &fx.basic().unstripped, &common::repair_rules(), "");
    let out = soforge(&["--config", cfg.to_str().unwrap(), "run"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(stdout(&out).contains("libfixture_basic.so | 5 | 10 | 5 | 100"));
    let ledger = RunLedger::load(&tmp.path().join("work/run.ldjson")).unwrap();
    assert!(ledger.functions.values().all(|f| f.status == SessionStatus::Done));
}

#[test]
fn run_always_broken_exits_one() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scripted_config(tmp.path(), &fx.basic().unstripped, &common::always_broken_rules(), "max_functions = 2");
    let out = soforge(&["--config", cfg.to_str().unwrap(), "--json", "run"]);
    assert_eq!(code(&out), 1);
    let report: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["api_coverage_pct"], 0.0);
    assert_eq!(report["source_targets"], 20);
    let ledger = RunLedger::load(&tmp.path().join("work/run.ldjson")).unwrap();
    for f in ledger.functions.values() {
        assert_eq!(f.attempts.len(), 10);
        assert_eq!(f.status, SessionStatus::Failed);
    }
}

#[test]
fn unreachable_backend_exits_four_and_keeps_ledger() {
    let fx = require_fixtures!();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("http.toml");
    std::fs::write(
        &cfg,
        format!(
            "library_path = {:?}\nworkspace = \"work\"\nparallelism = 1\n\n[backend_params]\n\
endpoint = \"http://127.0.0.1:9/v1/chat/completions\"\nmodel = \"m\"\ntimeout_secs = \"2\"\n",
            fx.basic().unstripped.to_string_lossy()
        ),
    )
    .unwrap();
    let out = soforge(&["--config", cfg.to_str().unwrap(), "run"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("BACKEND_UNREACHABLE"));
    let ledger = RunLedger::load(&tmp.path().join("work/run.ldjson")).unwrap();
    assert_eq!(ledger.functions.len(), 5);
    let failed: Vec<_> = ledger.functions.values().filter(|f| f.status == SessionStatus::Failed).collect();
    assert_eq!(failed.len(), 1);
    assert!(failed[0].reason.as_deref().unwrap().starts_with("BACKEND_UNREACHABLE"));
}

#[test]
fn report_renders_totals_without_touching_ledger() {
    let tmp = tempfile::tempdir().unwrap();
    let (lib, f, s, n) = common::TABLE_ROWS[0];
    let path = tmp.path().join("run.ldjson");
    std::fs::write(&path, common::synthetic_ledger(lib, f, s, n).to_ldjson()).unwrap();
    let before = std::fs::read(&path).unwrap();

    let out = soforge(&["report", path.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("\nTotal | 144 | 274 | 170 | 100\n"), "{}", stdout(&out));

    let csv_out = tmp.path().join("report.csv");
    let out = soforge(&["report", path.to_str().unwrap(), "--format", "csv", "--out", csv_out.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let csv = std::fs::read_to_string(&csv_out).unwrap();
    assert!(csv.starts_with("library_name,fuzzable_exports,"));
    assert!(csv.contains("cJSON,144,274,"));

    let out = soforge(&["--json", "report", path.to_str().unwrap()]);
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["nominal_ratio_pct"], 62.04);

    assert_eq!(std::fs::read(&path).unwrap(), before);
}

#[test]
fn report_edge_cases() {
    let tmp = tempfile::tempdir().unwrap();
    let empty = tmp.path().join("empty.ldjson");
    std::fs::write(&empty, RunLedger::new("libnone.so", "r", Vec::<String>::new(), "").to_ldjson()).unwrap();
    let out = soforge(&["report", empty.to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    assert!(stdout(&out).contains("vacuously"));

    let bad = tmp.path().join("bad.ldjson");
    std::fs::write(&bad, "{\"record\":\"attempt\"}\n{}\n").unwrap();
    assert_eq!(code(&soforge(&["report", bad.to_str().unwrap()])), 2);
    assert_eq!(code(&soforge(&["report", tmp.path().join("absent").to_str().unwrap()])), 2);
}

#[test]
fn replay_matches_recording_and_reports_missing_transcripts() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let cfg = scripted_config(tmp.path(), &fx.basic().unstripped, &common::repair_rules(), "max_functions = 3");
    let cfg = cfg.to_str().unwrap();
    assert_eq!(code(&soforge(&["--config", cfg, "run"])), 0);
    let transcripts = tmp.path().join("work/transcripts");
    let recorded = RunLedger::load(&tmp.path().join("work/run.ldjson")).unwrap();

    let out = soforge(&["--config", cfg, "replay", transcripts.to_str().unwrap()]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let replayed = RunLedger::load(&tmp.path().join("work.replay/run.ldjson")).unwrap();
    assert_eq!(replayed.normalized_json(), recorded.normalized_json());

    let victim = recorded.functions.keys().next().unwrap().clone();
    std::fs::remove_file(transcripts.join(format!("{victim}.json"))).unwrap();
    let ws = tmp.path().join("partial");
    let out = soforge(&["--config", cfg, "--workspace", ws.to_str().unwrap(), "replay", transcripts.to_str().unwrap()]);
    assert_eq!(code(&out), 1);
    let partial = RunLedger::load(&ws.join("run.ldjson")).unwrap();
    for (name, f) in &partial.functions {
        if *name == victim {
            assert_eq!(f.status, SessionStatus::Failed);
            assert!(f.reason.as_deref().unwrap().starts_with("TRANSCRIPT_MISSING"));
        } else {
            assert_eq!(f.status, SessionStatus::Done, "{name}");
        }
    }
}
