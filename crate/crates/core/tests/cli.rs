use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use migrasim::algorithms::AlgorithmVariant;
use migrasim::scenario::experiment;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_migrasim"))
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(name)
}

fn small(dir: &Path, variant: AlgorithmVariant) -> PathBuf {
    let path = dir.join(format!("{variant}.json"));
    fs::write(&path, experiment(variant, 1000, 1000.0, 0.5).to_json()).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

#[test]
fn run_writes_metrics_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let s = small(dir.path(), AlgorithmVariant::SingleTrackAllAtOnce);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = bin().arg("run").arg(&s).arg("--out-dir").arg(out).output().unwrap();
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let first = fs::read(a.join("metrics.csv")).unwrap();
    assert!(String::from_utf8_lossy(&first).starts_with("label,completed,"));
    assert_eq!(first, fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn variant_override_and_json_format() {
    let dir = tempfile::tempdir().unwrap();
    let s = small(dir.path(), AlgorithmVariant::SingleTrackAllAtOnce);
    let o = bin()
        .args(["run", s.to_str().unwrap(), "--variant", "single-track-partial", "--format", "json", "--trace", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("metrics.json")).unwrap()).unwrap();
    assert_eq!(v["variant"], "single-track-partial");
    assert_eq!(v["correct"], true);
    assert!(dir.path().join("trace.json").exists());
    assert!(dir.path().join("baseline_trace.json").exists());
}

#[test]
fn lost_state_exits_incorrect() {
    let dir = tempfile::tempdir().unwrap();
    let s = small(dir.path(), AlgorithmVariant::PauseDrainResume);
    let o = bin().arg("run").arg(&s).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), 3);
}

#[test]
fn malformed_input_exits_schema() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    fs::write(&bad, "{ not json").unwrap();
    assert_eq!(code(&bin().arg("validate").arg(&bad).output().unwrap()), 2);
    assert_eq!(code(&bin().arg("run").arg(&bad).output().unwrap()), 2);

    let s = small(dir.path(), AlgorithmVariant::SingleTrackAllAtOnce);
    let text = fs::read_to_string(&s).unwrap().replacen("\"name\"", "\"nmae\"", 1);
    fs::write(&bad, text).unwrap();
    let o = bin().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("nmae"));

    assert_eq!(code(&bin().args(["run", "--variant", "teleport"]).arg(&s).output().unwrap()), 2);
}

#[test]
fn validate_accepts_fixtures() {
    for f in fs::read_dir(Path::new(env!("CARGO_MANIFEST_DIR")).join("scenarios")).unwrap() {
        let p = f.unwrap().path();
        let o = bin().arg("validate").arg(&p).output().unwrap();
        assert_eq!(code(&o), 0, "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
    }
}

#[test]
fn decide_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().arg("decide").arg(fixture("use_case_decision.json")).arg("--out-dir").arg(dir.path()).output().unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("decisions.csv")).unwrap();
    let mut lines = csv.lines();
    assert!(lines.next().unwrap().starts_with("pt,current,"));
    assert_eq!(lines.count(), 4);
}

#[test]
fn compare_covers_requested_variants() {
    let dir = tempfile::tempdir().unwrap();
    let s = small(dir.path(), AlgorithmVariant::SingleTrackAllAtOnce);
    let o = bin()
        .args(["compare", s.to_str().unwrap(), "--variants", "single-track-all-at-once,checkpoint-assisted-parallel-track", "--seed", "1,2", "--out-dir"])
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(dir.path().join("compare.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
}
