use serde::{Deserialize, Serialize};

use super::RunLedger;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageReport {
    pub library_name: String,
    pub fuzzable_exports: u64,
    pub source_targets: u64,
    /// Attempts whose compile succeeded, regardless of the smoke run.
    pub compiled_targets: u64,
    /// Attempts that compiled and ran nominally.
    pub nominal_targets: u64,
    pub functions_covered: u64,
    pub api_coverage_pct: f64,
    pub nominal_ratio_pct: f64,
    pub mean_sources_per_function: f64,
    /// Set when there are no fuzzable exports and coverage is reported as 100.
    pub vacuous: bool,
}

/// `scale * num / den` rounded half-up to two decimals, in exact integer
/// arithmetic.
pub fn ratio_half_up(num: u64, den: u64, scale: u64) -> f64 {
    assert!(den > 0, "zero denominator");
    let num = num as u128 * scale as u128 * 100;
    let den = den as u128;
    let hundredths = (2 * num + den) / (2 * den);
    hundredths as f64 / 100.0
}

pub fn compute_report(ledger: &RunLedger) -> CoverageReport {
    let fuzzable = ledger.functions.len() as u64;
    let mut sources = 0;
    let mut compiled = 0;
    let mut nominal = 0;
    let mut covered = 0;
    for outcome in ledger.functions.values() {
        sources += outcome.attempts.len() as u64;
        compiled += outcome.attempts.iter().filter(|a| a.compile.success).count() as u64;
        let n = outcome.attempts.iter().filter(|a| a.is_nominal()).count() as u64;
        nominal += n;
        if n > 0 {
            covered += 1;
        }
    }
    let vacuous = fuzzable == 0;
    CoverageReport {
        library_name: ledger.library_name.clone(),
        fuzzable_exports: fuzzable,
        source_targets: sources,
        compiled_targets: compiled,
        nominal_targets: nominal,
        functions_covered: covered,
        api_coverage_pct: if vacuous { 100.0 } else { ratio_half_up(covered, fuzzable, 100) },
        nominal_ratio_pct: if sources == 0 { 0.0 } else { ratio_half_up(nominal, sources, 100) },
        mean_sources_per_function: if vacuous { 0.0 } else { ratio_half_up(sources, fuzzable, 1) },
        vacuous,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReportFormat {
    TableText,
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "text" | "table" | "table_text" => Ok(Self::TableText),
            "json" => Ok(Self::Json),
            "csv" => Ok(Self::Csv),
            other => Err(format!("unknown report format {other:?} (text, json, csv)")),
        }
    }
}

fn pct(v: f64) -> String {
    if v.fract() == 0.0 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

const HEADER: [&str; 5] = [
    "Library",
    "Fuzzable Exports",
    "Target Source Code",
    "Compiled Targets",
    "API Coverage %",
];

/// Column sums with the ratios recomputed from the summed counts.
pub fn total_report(reports: &[CoverageReport]) -> CoverageReport {
    let sum = |f: fn(&CoverageReport) -> u64| reports.iter().map(f).sum::<u64>();
    let fuzzable = sum(|r| r.fuzzable_exports);
    let sources = sum(|r| r.source_targets);
    let covered = sum(|r| r.functions_covered);
    let nominal = sum(|r| r.nominal_targets);
    CoverageReport {
        library_name: "Total".into(),
        fuzzable_exports: fuzzable,
        source_targets: sources,
        compiled_targets: sum(|r| r.compiled_targets),
        nominal_targets: nominal,
        functions_covered: covered,
        api_coverage_pct: if fuzzable == 0 { 100.0 } else { ratio_half_up(covered, fuzzable, 100) },
        nominal_ratio_pct: if sources == 0 { 0.0 } else { ratio_half_up(nominal, sources, 100) },
        mean_sources_per_function: if fuzzable == 0 { 0.0 } else { ratio_half_up(sources, fuzzable, 1) },
        vacuous: fuzzable == 0,
    }
}

/// Table rows list nominal targets under "Compiled Targets"; the raw
/// compile-success count is in the footer and in the JSON/CSV forms.
fn table(reports: &[CoverageReport]) -> String {
    let row = |r: &CoverageReport| {
        [
            r.library_name.clone(),
            r.fuzzable_exports.to_string(),
            r.source_targets.to_string(),
            r.nominal_targets.to_string(),
            pct(r.api_coverage_pct),
        ]
        .join(" | ")
    };
    let total = total_report(reports);
    let mut out = HEADER.join(" | ");
    out.push('\n');
    for r in reports {
        out.push_str(&row(r));
        out.push('\n');
    }
    out.push_str(&row(&total));
    out.push('\n');
    out.push_str(&format!(
        "compile successes: {}; nominal ratio: {}%; mean sources per function: {:.2}\n",
        total.compiled_targets,
        pct(total.nominal_ratio_pct),
        total.mean_sources_per_function
    ));
    if total.vacuous {
        out.push_str("note: no fuzzable exports; API coverage is vacuously 100%\n");
    }
    out
}

pub fn render_reports(reports: &[CoverageReport], format: ReportFormat) -> String {
    match format {
        ReportFormat::TableText => table(reports),
        ReportFormat::Json => {
            let mut s = if reports.len() == 1 {
                serde_json::to_string_pretty(&reports[0])
            } else {
                serde_json::to_string_pretty(reports)
            }
            .expect("report serializes");
            s.push('\n');
            s
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            if reports.is_empty() {
                let _ = w.write_record(csv_header());
            }
            for r in reports {
                w.serialize(r).expect("report row serializes");
            }
            String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf-8 csv")
        }
    }
}

fn csv_header() -> [&'static str; 10] {
    [
        "library_name",
        "fuzzable_exports",
        "source_targets",
        "compiled_targets",
        "nominal_targets",
        "functions_covered",
        "api_coverage_pct",
        "nominal_ratio_pct",
        "mean_sources_per_function",
        "vacuous",
    ]
}

pub fn render_report(report: &CoverageReport, format: ReportFormat) -> String {
    render_reports(std::slice::from_ref(report), format)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forge::Verdict;
    use crate::ledger::tests::attempt;
    use crate::ledger::RunLedger;
    use proptest::prelude::*;

    #[test]
    fn half_up_rounding() {
        assert_eq!(ratio_half_up(1209, 1601, 100), 75.52);
        assert_eq!(ratio_half_up(1601, 558, 1), 2.87);
        assert_eq!(ratio_half_up(2, 3, 100), 66.67);
        assert_eq!(ratio_half_up(1, 8, 1), 0.13);
        assert_eq!(ratio_half_up(1, 200, 1), 0.01);
    }

    #[test]
    fn three_function_example() {
        let mut l = RunLedger::new("l", "r", ["a", "b", "c"].map(String::from), "");
        l.apply_attempt(attempt("a", 1, true, Some(Verdict::Nominal))).unwrap();
        l.apply_attempt(attempt("b", 1, false, None)).unwrap();
        l.apply_attempt(attempt("b", 2, true, Some(Verdict::Crash))).unwrap();
        l.apply_attempt(attempt("b", 3, true, Some(Verdict::Nominal))).unwrap();
        l.apply_attempt(attempt("c", 1, false, None)).unwrap();
        l.apply_attempt(attempt("c", 2, false, None)).unwrap();
        let r = compute_report(&l);
        assert_eq!(r.source_targets, 6);
        assert_eq!(r.compiled_targets, 3);
        assert_eq!(r.nominal_targets, 2);
        assert_eq!(r.api_coverage_pct, 66.67);
        assert_eq!(r.mean_sources_per_function, 2.0);
    }

    #[test]
    fn empty_ledger_is_vacuous() {
        let l = RunLedger::new("l", "r", Vec::<String>::new(), "");
        let r = compute_report(&l);
        assert!(r.vacuous);
        assert_eq!(r.api_coverage_pct, 100.0);
        assert_eq!((r.fuzzable_exports, r.source_targets, r.nominal_targets), (0, 0, 0));
        let text = render_report(&r, ReportFormat::TableText);
        assert!(text.starts_with("Library | Fuzzable Exports | Target Source Code | Compiled Targets | API Coverage %\n"));
        assert!(text.contains("vacuously"));
    }

    #[test]
    fn json_round_trip() {
        let mut l = RunLedger::new("l", "r", ["a", "b", "c"].map(String::from), "");
        l.apply_attempt(attempt("a", 1, true, Some(Verdict::Nominal))).unwrap();
        let r = compute_report(&l);
        let back: CoverageReport = serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn csv_quoting() {
        let l = RunLedger::new("lib, \"odd\".so", "r", ["a".to_string()], "");
        let csv = render_report(&compute_report(&l), ReportFormat::Csv);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), csv_header().join(","));
        assert!(lines.next().unwrap().starts_with("\"lib, \"\"odd\"\".so\",1,0,0,0,0,0.0,0.0,0.0,false"));
        let empty = render_reports(&[], ReportFormat::Csv);
        assert_eq!(empty.trim_end(), csv_header().join(","));
    }

    proptest! {
        #[test]
        fn report_identities(plan in proptest::collection::vec(proptest::collection::vec(0u8..4, 0..6), 0..12)) {
            let names: Vec<String> = (0..plan.len()).map(|i| format!("f{i}")).collect();
            let mut l = RunLedger::new("l", "r", names.clone(), "");
            let mut expect = (0u64, 0u64, 0u64);
            for (name, attempts) in names.iter().zip(&plan) {
                for (i, kind) in attempts.iter().enumerate() {
                    let (compiled, verdict) = match kind {
                        0 => (false, None),
                        1 => (true, Some(Verdict::Crash)),
                        2 => (true, Some(Verdict::SetupFailure)),
                        _ => (true, Some(Verdict::Nominal)),
                    };
                    expect.0 += 1;
                    expect.1 += compiled as u64;
                    expect.2 += (*kind == 3) as u64;
                    l.apply_attempt(attempt(name, i as u32 + 1, compiled, verdict)).unwrap();
                }
            }
            let r = compute_report(&l);
            prop_assert_eq!((r.source_targets, r.compiled_targets, r.nominal_targets), expect);
            prop_assert!(r.source_targets >= r.compiled_targets && r.compiled_targets >= r.nominal_targets);
            prop_assert_eq!(r.clone(), compute_report(&l));
            prop_assert!(r.api_coverage_pct >= 0.0 && r.api_coverage_pct <= 100.0);
        }
    }
}
