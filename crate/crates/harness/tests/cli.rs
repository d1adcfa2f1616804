use std::path::PathBuf;
use std::process::{Command, Output};

fn oobheap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_oobheap"))
        .args(args)
        .env_remove("OOBHEAP_POLICY")
        .output()
        .expect("run oobheap")
}

fn scratch(name: &str, contents: &str) -> PathBuf {
    let p = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    std::fs::write(&p, contents).unwrap();
    p
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

#[test]
fn replay_clean_trace() {
    let trace = scratch("clean.trace", "# two threads\nt 0\na 1 100\na 2 3000\nt 1\nf 1\nr 2 200000\nz 3 4 8\nt 0\nf 2\n");
    let out = oobheap(&["replay", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stdout = text(&out.stdout);
    assert!(stdout.contains("ops=9\n"), "{stdout}");
    assert!(stdout.contains("double_frees=0\n"));
    assert!(stdout.contains("leftover_blocks=1\n"));
    assert!(text(&out.stderr).contains("wall_time_ms="));
}

#[test]
fn replay_reports_expected_violations() {
    let trace = scratch("faults.trace", "a 1 64\nf 1\nf 1\nf 99\n");
    let out = oobheap(&["replay", trace.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let stderr = text(&out.stderr);
    assert!(stderr.contains("oobheap: double-free ptr=0x"), "{stderr}");
    assert!(stderr.contains("oobheap: invalid-free ptr=0x"), "{stderr}");
    let stdout = text(&out.stdout);
    assert!(stdout.contains("double_frees=1\n") && stdout.contains("invalid_frees=1\n"));
    assert!(stdout.contains("expected_violations=2\n"));
}

#[test]
fn replay_breach_prints_failing_prefix() {
    let trace = scratch("breach.trace", "a 1 16\na 2 16\na 1 16\nf 2\n");
    let out = oobheap(&["replay", trace.to_str().unwrap()]);
    assert!(!out.status.success());
    let stderr = text(&out.stderr);
    assert!(stderr.contains("failing prefix (3 events):\na 1 16\na 2 16\na 1 16\n"), "{stderr}");
}

#[test]
fn replay_rejects_malformed_trace() {
    let trace = scratch("bad.trace", "a 1 16\nf  1\n");
    let out = oobheap(&["replay", trace.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(text(&out.stderr).contains("line 2"), "{}", text(&out.stderr));
}

#[test]
fn replay_writes_stats_file() {
    let trace = scratch("stats.trace", "a 1 600000\nf 1\n");
    let json = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("stats.json");
    let out = oobheap(&["replay", trace.to_str().unwrap(), "--stats-out", json.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(v["ops"], 2);
    assert_eq!(v["ext_maps"], 1);
}

#[test]
fn seeded_stress_is_reproducible() {
    let args = ["stress", "--kind", "churn", "--iters", "50000", "--seed", "7"];
    let a = oobheap(&args);
    let b = oobheap(&args);
    assert!(a.status.success(), "{}", text(&a.stderr));
    assert_eq!(a.stdout, b.stdout);
    assert!(text(&a.stdout).contains("ops=50000\n"));
}

#[test]
fn stress_kinds_run() {
    let out = oobheap(&["stress", "--kind", "mstress", "--threads", "3", "--iters", "5000"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(!text(&out.stdout).contains("drained=0\n"));
    let out = oobheap(&["stress", "--kind", "larson", "--threads", "2", "--iters", "2000", "--slots", "64"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    assert!(text(&out.stdout).contains("extra.gen10_committed="));
}

#[test]
fn stress_rejects_bad_sizes() {
    let out = oobheap(&["stress", "--min", "100", "--max", "10"]);
    assert!(!out.status.success());
}

#[test]
fn security_suite_passes_under_each_policy() {
    for policy in ["ignore", "report", "abort"] {
        let out = oobheap(&["security", "--policy", policy]);
        let stdout = text(&out.stdout);
        assert!(out.status.success(), "{policy}: {stdout}");
        assert!(stdout.contains("PASS deferred/fixed\n"));
        assert!(!stdout.contains("FAIL"));
    }
}

#[test]
fn generated_traces_replay() {
    let out = oobheap(&["gen", "--seed", "3", "--events", "2000", "--threads", "3", "--fault-rate", "0.01"]);
    assert!(out.status.success());
    let trace = scratch("gen.trace", &text(&out.stdout));
    let out = oobheap(&["replay", trace.to_str().unwrap(), "--policy", "ignore"]);
    assert!(out.status.success(), "{}", text(&out.stderr));
}
