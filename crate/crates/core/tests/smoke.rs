mod common;

use std::time::Duration;

use common::require_fixtures;
use soforge_core::forge::{smoke_run, ExitStatusInfo, RunConfig, RUN_LOG};
use soforge_core::Verdict;

fn cfg(window: Duration) -> RunConfig {
    RunConfig {
        window,
        ..RunConfig::default()
    }
}

#[test]
fn idle_driver_is_nominal_at_the_window() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let lib = &fx.basic().unstripped;
    let (dir, bin) = common::build_driver(tmp.path(), "add", lib, &common::idle_driver("add"));
    let r = smoke_run(&bin, &dir, lib, &cfg(Duration::from_secs(2))).unwrap();
    assert_eq!(r.verdict, Verdict::Nominal);
    assert_eq!(r.exit_status, ExitStatusInfo::Killed);
    assert!((1.9..4.0).contains(&r.wall_time), "{}", r.wall_time);
    assert!(dir.join(RUN_LOG).is_file());
}

#[test]
fn bad_pointer_is_a_crash_with_artifact() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let lib = &fx.basic().unstripped;
    let (dir, bin) = common::build_driver(tmp.path(), "process_blob", lib, &common::deref_crash_driver());
    let r = smoke_run(&bin, &dir, lib, &cfg(Duration::from_secs(5))).unwrap();
    assert_eq!(r.verdict, Verdict::Crash, "{}", r.captured_output);
    assert!(r.captured_output.contains("AddressSanitizer"));
    let artifact = r.crash_artifact.expect("crash input saved");
    assert!(dir.join(artifact).is_file());
}

#[test]
fn unresolvable_library_is_setup_failure() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let lib = &fx.basic().unstripped;
    let (dir, bin) = common::build_driver(tmp.path(), "add", lib, &common::linked_driver());
    let run = RunConfig {
        inject_library_path: false,
        ..cfg(Duration::from_secs(5))
    };
    let r = smoke_run(&bin, &dir, lib, &run).unwrap();
    assert_eq!(r.verdict, Verdict::SetupFailure, "{}", r.captured_output);
    assert!(r.captured_output.contains("libfixture_basic.so"));

    // the same binary runs once the loader can find the library
    let ok = smoke_run(&bin, &dir, lib, &cfg(Duration::from_secs(2))).unwrap();
    assert_eq!(ok.verdict, Verdict::Nominal, "{}", ok.captured_output);
}

#[test]
fn bounded_run_count_is_early_exit() {
    let fx = require_fixtures!();
    if !common::clang_fuzzer_available() {
        return;
    }
    let tmp = tempfile::tempdir().unwrap();
    let lib = &fx.basic().unstripped;
    let (dir, bin) = common::build_driver(tmp.path(), "add", lib, &common::linked_driver());
    let run = RunConfig {
        extra_args: vec!["-runs=10".into()],
        ..cfg(Duration::from_secs(5))
    };
    let r = smoke_run(&bin, &dir, lib, &run).unwrap();
    assert_eq!(r.verdict, Verdict::EarlyExitFailure);
    assert_eq!(r.exit_status, ExitStatusInfo::Code(0));
}

#[test]
fn missing_artifact_is_setup_failure() {
    let tmp = tempfile::tempdir().unwrap();
    let r = smoke_run(&tmp.path().join("absent.bin"), tmp.path(), &tmp.path().join("lib.so"), &cfg(Duration::from_secs(1)))
        .unwrap();
    assert_eq!(r.verdict, Verdict::SetupFailure);
    assert_eq!(r.exit_status, ExitStatusInfo::NotStarted);
}
