use std::path::PathBuf;
use std::process::{Command, Output};

use admm_lsmr::cli::{ModeSummary, TrainReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_admm-lsmr"))
}

fn iris() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data/iris.csv")
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn train(extra: &[&str]) -> Output {
    let iris = iris();
    let mut args = vec!["train", "--data", iris.to_str().unwrap()];
    args.extend_from_slice(extra);
    run(&args)
}

#[test]
fn train_smoke() {
    let out = train(&["--arch", "4,8,3", "--arithmetic", "real", "--iters", "50", "--seed", "7"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report: TrainReport = serde_json::from_slice(&out.stdout).unwrap();
    assert!((0.0..=1.0).contains(&report.test_accuracy));
    assert!((0.0..=1.0).contains(&report.train_accuracy));
    assert_eq!(report.config.arch, vec![4, 8, 3]);
    assert_eq!((report.dataset.train_samples, report.dataset.test_samples), (120, 30));
    let timing = report.timing.expect("timings present by default");
    assert!((timing.percentages.total() - 100.0).abs() <= 0.5);
    assert_eq!(timing.per_iteration.len(), 50);
}

#[test]
fn fixed_report_echoes_format() {
    let out = train(&["--arithmetic", "fixed32", "--rounding", "nearest", "--iters", "3", "--no-timings"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["config"]["format"], "fixed<32,18>");
    assert_eq!(v["config"]["rounding"], "nearest");
    assert_eq!(v["config"]["arithmetic"], "fixed32");
    assert!(v.get("timing").is_none());
    let report: TrainReport = serde_json::from_value(v).unwrap();
    assert_eq!(report.saturations.per_iteration.len(), 3);
}

#[test]
fn reports_are_byte_identical() {
    for arith in ["real", "fixed32"] {
        let flags = ["--arithmetic", arith, "--iters", "10", "--seed", "11", "--no-timings"];
        let a = train(&flags);
        let b = train(&flags);
        assert!(a.status.success());
        assert_eq!(a.stdout, b.stdout);
    }
}

#[test]
fn worker_count_does_not_change_accuracy() {
    let acc = |w: &str| {
        let out = train(&["--arithmetic", "fixed32", "--iters", "10", "--workers", w, "--no-timings"]);
        let r: TrainReport = serde_json::from_slice(&out.stdout).unwrap();
        (r.train_accuracy, r.test_accuracy, r.saturations)
    };
    assert_eq!(acc("1"), acc("4"));
}

#[test]
fn out_file_and_bias() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("report.json");
    let out = train(&["--iters", "2", "--bias", "--out", path.to_str().unwrap()]);
    assert!(out.status.success());
    assert!(out.stdout.is_empty());
    let report: TrainReport = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    assert!(report.config.bias);
    assert_eq!(report.config.arch, vec![4, 8, 8, 3]);
}

#[test]
fn compare_rounding_smoke() {
    let iris = iris();
    let out = run(&["compare-rounding", "--data", iris.to_str().unwrap(), "--runs", "2", "--iters", "5"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let mut rdr = csv::Reader::from_reader(out.stdout.as_slice());
    let rows: Vec<ModeSummary> = rdr.deserialize().collect::<Result<_, _>>().unwrap();
    let modes: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(modes, ["real", "nearest", "stochastic", "up", "down"]);
    assert!(rows.iter().all(|r| (0.0..=1.0).contains(&r.mean) && r.runs == 2));

    let out = run(&["compare-rounding", "--data", iris.to_str().unwrap(), "--runs", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn profile_on_small_synthetic() {
    let out = run(&["profile", "--samples", "300", "--iters", "2", "--arch", "28,6,6,2"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    let p = &v["percentages"];
    let total: f64 = ["weight", "activation", "output", "lagrangian"].iter().map(|k| p[k].as_f64().unwrap()).sum();
    assert!((total - 100.0).abs() <= 0.5);
    assert_eq!(v["iterations"], 2);
}

#[test]
fn selftest_passes() {
    let out = run(&["selftest"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 8);
    assert!(!text.contains("FAIL"));
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["train", "--iters", "many"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--arithmetic", "fixed8"]).status.code(), Some(2));
    assert_eq!(run(&["train"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--data", "/no/such/file.csv"]).status.code(), Some(1));
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b,c\n1,2,x\n1,oops,y\n").unwrap();
    let out = run(&["train", "--data", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 3"));
}
