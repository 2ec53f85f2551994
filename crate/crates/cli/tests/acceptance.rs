//! One pass/fail line per acceptance criterion (runs without the test
//! harness so the lines are always printed).
//!
//! Criteria 1–7 run in-process through the self-test suites and must also
//! meet their runtime budgets; criterion 8 runs the `mfsmp selftest` binary
//! twice and compares the report files byte for byte.

use std::process::Command;
use std::time::{Duration, Instant};

use mfsmp_core::selftest::{run_suite, SelftestOptions, Suite};

fn budget(suite: Suite) -> Duration {
    Duration::from_secs(match suite {
        Suite::Noise | Suite::Replica => 1,
        Suite::Duality | Suite::Operator | Suite::Rates => 10,
        Suite::Gradient => 30,
        Suite::Optimizer | Suite::Determinism => 60,
    })
}

fn selftest_report(dir: &std::path::Path, name: &str) -> (bool, Vec<u8>) {
    let path = dir.join(name);
    let out = Command::new(env!("CARGO_BIN_EXE_mfsmp")).arg("selftest").arg("--report").arg(&path).output().expect("mfsmp runs");
    (out.status.success(), std::fs::read(&path).unwrap_or_default())
}

fn main() {
    let opts = SelftestOptions::default();
    let mut lines = Vec::new();
    let mut all = true;
    for suite in [Suite::Noise, Suite::Duality, Suite::Gradient, Suite::Operator, Suite::Rates, Suite::Optimizer, Suite::Replica] {
        let start = Instant::now();
        let report = run_suite(suite, &opts).expect("suite runs");
        let elapsed = start.elapsed();
        let in_budget = elapsed < budget(suite);
        let pass = report.pass && in_budget;
        all &= pass;
        let summary = report.summary();
        let detail = summary.split_once(' ').map_or(summary.as_str(), |(_, rest)| rest);
        lines.push(format!(
            "[{}] {detail} ({:.2} s, budget {} s)",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            budget(suite).as_secs()
        ));
    }

    let dir = tempfile::tempdir().unwrap();
    let (ok_a, first) = selftest_report(dir.path(), "first.json");
    let (ok_b, second) = selftest_report(dir.path(), "second.json");
    let identical = !first.is_empty() && first == second;
    let pass = identical && ok_a && ok_b;
    all &= pass;
    lines.push(format!(
        "[{}] 8. determinism: two selftest runs wrote {} report files ({} bytes); both runs exit 0: {}",
        if pass { "PASS" } else { "FAIL" },
        if identical { "byte-identical" } else { "different" },
        first.len(),
        ok_a && ok_b
    ));

    for l in &lines {
        println!("{l}");
    }
    let failed = lines.iter().filter(|l| l.starts_with("[FAIL]")).count();
    println!("acceptance: {} of {} criteria pass", lines.len() - failed, lines.len());
    if !all {
        std::process::exit(1);
    }
}
