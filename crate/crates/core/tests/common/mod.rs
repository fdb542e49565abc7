//! Test support: builds the C fixture libraries (with and without symbols)
//! and provides an independent `readelf`-based export oracle.

#![allow(dead_code)]

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use serde::Deserialize;

pub const FIXTURE_DIR: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../core/tests/fixtures");

#[derive(Debug, Clone, Deserialize)]
pub struct ExpectedExport {
    pub name: String,
    pub arity: usize,
    pub fuzzable: bool,
}

#[derive(Debug, Clone, Deserialize)]
pub struct FixtureSpec {
    pub name: String,
    pub source_files: Vec<String>,
    pub build_flags: String,
    pub expected_exports: Vec<ExpectedExport>,
}

#[derive(Debug, Deserialize)]
struct Manifest {
    fixtures: Vec<FixtureSpec>,
}

#[derive(Debug, Clone)]
pub struct BuiltFixture {
    pub spec: FixtureSpec,
    pub unstripped: PathBuf,
    pub stripped: PathBuf,
}

impl BuiltFixture {
    pub fn file_name(&self) -> String {
        format!("{}.so", self.spec.name)
    }

    pub fn variants(&self) -> [&Path; 2] {
        [&self.unstripped, &self.stripped]
    }
}

pub struct Fixtures {
    _dir: tempfile::TempDir,
    pub built: Vec<BuiltFixture>,
}

impl Fixtures {
    pub fn get(&self, name: &str) -> &BuiltFixture {
        self.built
            .iter()
            .find(|f| f.spec.name == name)
            .unwrap_or_else(|| panic!("no fixture {name}"))
    }

    pub fn basic(&self) -> &BuiltFixture {
        self.get("libfixture_basic")
    }

    pub fn ext(&self) -> &BuiltFixture {
        self.get("libfixture_ext")
    }
}

pub fn tool_available(tool: &str) -> bool {
    Command::new(tool)
        .arg("--version")
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

pub fn manifest() -> Vec<FixtureSpec> {
    let text = std::fs::read_to_string(Path::new(FIXTURE_DIR).join("manifest.json"))
        .expect("fixture manifest");
    serde_json::from_str::<Manifest>(&text)
        .expect("manifest parses")
        .fixtures
}

/// Builds every fixture once per test binary. Returns `None` (and the caller
/// skips) when no C toolchain is present.
pub fn fixtures() -> Option<&'static Fixtures> {
    static CELL: OnceLock<Option<Fixtures>> = OnceLock::new();
    CELL.get_or_init(|| {
        if !tool_available("cc") || !tool_available("strip") {
            eprintln!("SKIP: C toolchain missing; fixture-backed tests skipped");
            return None;
        }
        let dir = tempfile::tempdir().expect("tempdir");
        let mut built = Vec::new();
        for spec in manifest() {
            let stripped_dir = dir.path().join("stripped");
            std::fs::create_dir_all(&stripped_dir).unwrap();
            let out = dir.path().join(format!("{}.so", spec.name));
            let soname = format!("-Wl,-soname,{}.so", spec.name);
            let mut cmd = Command::new("cc");
            cmd.args(spec.build_flags.split_whitespace()).arg(&soname).arg("-o").arg(&out);
            for src in &spec.source_files {
                cmd.arg(Path::new(FIXTURE_DIR).join(src));
            }
            let status = cmd.output().expect("run cc");
            assert!(
                status.status.success(),
                "fixture build failed: {}",
                String::from_utf8_lossy(&status.stderr)
            );
            let stripped = stripped_dir.join(format!("{}.so", spec.name));
            let st = Command::new("strip")
                .arg("--strip-all")
                .arg("-o")
                .arg(&stripped)
                .arg(&out)
                .status()
                .expect("run strip");
            assert!(st.success());
            built.push(BuiltFixture {
                spec,
                unstripped: out,
                stripped,
            });
        }
        Some(Fixtures { _dir: dir, built })
    })
    .as_ref()
}

/// Defined GLOBAL/WEAK FUNC names from `readelf --dyn-syms`.
pub fn oracle_exports(path: &Path) -> BTreeSet<String> {
    let out = Command::new("readelf")
        .args(["--dyn-syms", "-W"])
        .arg(path)
        .output()
        .expect("run readelf");
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let mut names = BTreeSet::new();
    for line in text.lines() {
        let cols: Vec<&str> = line.split_whitespace().collect();
        // Num: Value Size Type Bind Vis Ndx Name
        if cols.len() < 8 || !cols[0].ends_with(':') {
            continue;
        }
        let (kind, bind, ndx, name) = (cols[3], cols[4], cols[6], cols[7]);
        if kind == "FUNC" && (bind == "GLOBAL" || bind == "WEAK") && ndx != "UND" {
            names.insert(name.split('@').next().unwrap().to_string());
        }
    }
    names
}

pub fn clang_fuzzer_available() -> bool {
    static CELL: OnceLock<bool> = OnceLock::new();
    *CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let src = dir.path().join("probe.cc");
        std::fs::write(
            &src,
            "#include <cstdint>\n#include <cstddef>\nextern \"C\" int LLVMFuzzerTestOneInput(const uint8_t *d, size_t n) { (void)d; (void)n; return 0; }\n",
        )
        .unwrap();
        Command::new("clang++")
            .args(["-fsanitize=fuzzer,address", "-o"])
            .arg(dir.path().join("probe"))
            .arg(&src)
            .output()
            .map(|o| o.status.success())
            .unwrap_or(false)
    })
}

#[allow(unused_macros)]
macro_rules! require_fixtures {
    () => {
        match common::fixtures() {
            Some(f) => f,
            None => {
                eprintln!("SKIP: fixtures unavailable");
                return;
            }
        }
    };
}
#[allow(unused_imports)]
pub(crate) use require_fixtures;

pub const DRIVER_PRELUDE: &str = "#include <cstddef>\n#include <cstdint>\n#include <cstring>\n";

/// Uses a struct the compiler has never seen, so it cannot compile.
pub fn broken_driver(function: &str) -> String {
    format!(
        "```cpp\n{DRIVER_PRELUDE}extern \"C\" int64_t {function}(int64_t);\n\n\
extern \"C\" int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {{\n\
    struct hidden_ctx ctx;\n\
    memcpy(&ctx, data, size);\n\
    {function}((int64_t)&ctx);\n\
    return 0;\n\
}}\n```\n"
    )
}

/// Compiles, links and keeps fuzzing until killed.
pub fn idle_driver(function: &str) -> String {
    format!(
        "```cpp\n{DRIVER_PRELUDE}extern \"C\" int64_t {function}(int64_t);\n\n\
extern \"C\" int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {{\n\
    (void)data;\n\
    (void)size;\n\
    (void)&{function};\n\
    return 0;\n\
}}\n```\n"
    )
}

/// Hands `process_blob` a pointer built from the input (or a near-null one).
pub fn deref_crash_driver() -> String {
    format!(
        "```cpp\n{DRIVER_PRELUDE}extern \"C\" uint32_t process_blob(const void *);\n\n\
extern \"C\" int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {{\n\
    uintptr_t p = 0x10;\n\
    if (size >= sizeof(p)) {{\n\
        memcpy(&p, data, sizeof(p));\n\
        p &= 0xfff;\n\
    }}\n\
    return (int)process_blob((const void *)p) & 0;\n\
}}\n```\n"
    )
}

/// Calls into the library so the loader must resolve it.
pub fn linked_driver() -> String {
    format!(
        "```cpp\n{DRIVER_PRELUDE}extern \"C\" int add(int, int);\n\n\
extern \"C\" int LLVMFuzzerTestOneInput(const uint8_t *data, size_t size) {{\n\
    int a = size > 0 ? data[0] : 0;\n\
    return add(a, (int)size) & 0;\n\
}}\n```\n"
    )
}

pub const FUNCTION_CAPTURE: &str = r"Target function: `(?P<f>\w+)`";

fn text(content: &str) -> serde_json::Value {
    serde_json::json!({ "content": content, "tool_calls": [] })
}

fn call(tool: &str) -> serde_json::Value {
    serde_json::json!({ "content": "", "tool_calls": [{ "tool_name": tool, "arguments": { "function": "${f}" } }] })
}

fn rule_pattern(header: &str, responses: Vec<serde_json::Value>) -> serde_json::Value {
    serde_json::json!({
        "matcher": { "pattern": format!(r"{}[\s\S]*{}", regex_escape(header), FUNCTION_CAPTURE) },
        "responses": responses,
    })
}

fn regex_escape(s: &str) -> String {
    s.chars()
        .flat_map(|c| {
            if "\\.+*?()|[]{}^$#".contains(c) {
                vec!['\\', c]
            } else {
                vec![c]
            }
        })
        .collect()
}

/// One signature lookup, one disassembly lookup, then a broken driver; the
/// compile repair gets a driver that runs nominally.
pub fn repair_rules() -> String {
    rules(vec![call("get_signature"), call("get_disassembly"), text("Analysis done.")],
        vec![text(&broken_driver("${f}"))],
        vec![text(&idle_driver("${f}"))])
}

/// Every generated driver fails to compile.
pub fn always_broken_rules() -> String {
    rules(vec![text("Analysis done.")], vec![text(&broken_driver("${f}"))], vec![text(&broken_driver("${f}"))])
}

/// During generation the model asks for disassembly once more before it
/// writes code.
pub fn gating_rules() -> String {
    rules(
        vec![call("get_disassembly"), text("Analysis done.")],
        vec![call("get_disassembly")],
        vec![text(&idle_driver("${f}"))],
    )
}

fn rules(analysis: Vec<serde_json::Value>, generation: Vec<serde_json::Value>, repair: Vec<serde_json::Value>) -> String {
    let follow_up = if analysis.len() > 1 { analysis[1..].to_vec() } else { analysis.clone() };
    serde_json::json!({
        "rules": [
            rule_pattern("## Phase 1: analysis", vec![analysis[0].clone()]),
            rule_pattern("## Phase 2: driver generation", generation),
            rule_pattern("## Compile failure", repair.clone()),
            rule_pattern("## Runtime failure", repair),
            { "matcher": { "substring": "confidence: " }, "responses": follow_up },
            { "matcher": { "substring": "" }, "responses": [analysis.last().unwrap().clone()] },
        ]
    })
    .to_string()
}

/// Pipeline over `library` with the scripted backend, a virtual clock and a
/// short smoke window. The rules file is written next to the workspace.
pub fn scripted_setup(
    library: &Path,
    workspace: &Path,
    rules_json: &str,
    window: std::time::Duration,
) -> (soforge_core::PipelineConfig, soforge_core::PipelineEnv, std::sync::Arc<soforge_core::llm::VirtualClock>) {
    std::fs::create_dir_all(workspace).unwrap();
    let rules = workspace.join("rules.json");
    std::fs::write(&rules, rules_json).unwrap();
    let mut cfg = soforge_core::PipelineConfig {
        library_path: library.to_path_buf(),
        workspace: workspace.join("work"),
        backend: soforge_core::BackendKind::Scripted,
        parallelism: 5,
        ..Default::default()
    };
    cfg.backend_params.insert("rules".into(), rules.to_string_lossy().into_owned());
    cfg.budgets.smoke_run = window;
    let clock = std::sync::Arc::new(soforge_core::llm::VirtualClock::default());
    let env = soforge_core::PipelineEnv {
        backend_factory: cfg.backend_factory().unwrap(),
        provider: cfg.provider().unwrap(),
        clock: clock.clone(),
        cancel: Default::default(),
    };
    (cfg, env, clock)
}

/// Writes and compiles `reply` (a fenced driver) under `root/<name>/1`.
/// Returns the attempt directory and the artifact.
pub fn build_driver(root: &Path, name: &str, library: &Path, reply: &str) -> (PathBuf, PathBuf) {
    use soforge_core::forge::{compile, extract_source, CompileConfig, Workspace};
    let (code, origin) = extract_source(reply).expect("driver has code");
    let ws = Workspace::new(root);
    ws.write_source(name, 1, code, origin).unwrap();
    let dir = ws.attempt_dir(name, 1);
    let result = compile(&dir, library, &CompileConfig::default()).unwrap();
    assert!(result.success, "driver failed to compile:\n{}", result.stderr);
    (dir, result.artifact_path.unwrap())
}

/// (library, fuzzable exports, sources, nominal) for the published totals.
pub const TABLE_ROWS: [(&str, u64, u64, u64); 4] = [
    ("cJSON", 144, 274, 170),
    ("libmagic", 32, 104, 96),
    ("libpcap", 200, 602, 405),
    ("libplist", 182, 621, 538),
];

/// A ledger with `functions` entries, `sources` attempts and `nominal`
/// nominal attempts, every function holding at least one nominal attempt.
/// Failed attempts alternate between compile failures and early exits.
pub fn synthetic_ledger(library: &str, functions: u64, sources: u64, nominal: u64) -> soforge_core::RunLedger {
    use soforge_core::forge::ExitStatusInfo;
    use soforge_core::ledger::{CompileSummary, ExecSummary, SessionStatus};
    assert!(nominal >= functions && sources >= nominal);
    let names: Vec<String> = (0..functions).map(|i| format!("{library}_fn{i:03}")).collect();
    let mut ledger = soforge_core::RunLedger::new(library, "fixture", names.clone(), "");
    let extra_nominal = nominal - functions;
    let failed = sources - nominal;
    for (i, name) in names.iter().enumerate() {
        let i = i as u64;
        let share = |total: u64| total / functions + u64::from(i < total % functions);
        let (bad, good) = (share(failed), 1 + share(extra_nominal));
        for k in 0..bad + good {
            let ok = k >= bad;
            let compiled = ok || k % 2 == 1;
            let attempt = soforge_core::DriverAttempt {
                function_name: name.clone(),
                attempt_index: k as u32 + 1,
                source_path: Some(PathBuf::from(format!("{name}/{}/driver.cc", k + 1))),
                compile: CompileSummary {
                    success: compiled,
                    duration: 1.0,
                    timed_out: false,
                    stderr_bytes: if compiled { 0 } else { 120 },
                },
                exec: compiled.then_some(ExecSummary {
                    verdict: if ok { soforge_core::Verdict::Nominal } else { soforge_core::Verdict::EarlyExitFailure },
                    exit_status: if ok { ExitStatusInfo::Killed } else { ExitStatusInfo::Code(0) },
                    wall_time: if ok { 10.0 } else { 0.2 },
                    crash_artifact: None,
                }),
                timestamp: chrono::Utc::now(),
            };
            ledger.apply_attempt(attempt).unwrap();
        }
        ledger
            .apply_outcome(soforge_core::ledger::OutcomeRecord {
                function_name: name.clone(),
                status: SessionStatus::Done,
                reason: None,
                analysis_turns_used: 1,
            })
            .unwrap();
    }
    ledger
}
