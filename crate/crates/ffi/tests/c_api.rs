use std::ffi::{CStr, CString};
use std::ptr;

use migrasim_ffi::*;

const SCENARIO: &str = include_str!("../../core/scenarios/experiment_partial.json");
const DECISION: &str = include_str!("../../core/scenarios/use_case_decision.json");

/// The fixture scaled down to 2000 auctions with an early trigger.
fn small(json: &str) -> CString {
    let text = json
        .replace("\"count\": 100000", "\"count\": 2000")
        .replace("\"start\": 10.9999", "\"start\": 1.1999")
        .replace("\"trigger\": 5.0", "\"trigger\": 0.1");
    CString::new(text).unwrap()
}

fn last_error() -> String {
    let p = ms_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn run_and_read_metrics() {
    let json = small(SCENARIO);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ms_scenario_from_json(json.as_ptr(), &mut s) }, MsStatus::Ok);
    let v = CString::new("SingleTrackAllAtOnce").unwrap();
    assert_eq!(unsafe { ms_scenario_set_variant(s, v.as_ptr()) }, MsStatus::Ok);
    assert_eq!(unsafe { ms_scenario_set_seed(s, 7) }, MsStatus::Ok);
    let mut r = ptr::null_mut();
    assert_eq!(unsafe { ms_scenario_run(s, &mut r) }, MsStatus::Ok, "{}", last_error());
    let mut m = MsMetrics::default();
    assert_eq!(unsafe { ms_report_metrics(r, &mut m) }, MsStatus::Ok);
    assert!(m.completed && m.correct);
    assert_eq!(m.sink_outputs, 2000);
    assert!(m.freeze_time >= m.state_movement_time);
    let mut csv = ptr::null_mut();
    assert_eq!(unsafe { ms_report_csv(r, &mut csv) }, MsStatus::Ok);
    let text = unsafe { CStr::from_ptr(csv) }.to_str().unwrap().to_string();
    assert!(text.starts_with("label,completed,freeze_time_s"));
    assert!(text.contains("single-track-all-at-once,true,"));
    unsafe {
        ms_string_free(csv);
        ms_report_free(r);
        ms_scenario_free(s);
    }
}

#[test]
fn schema_errors_carry_a_path() {
    let bad = CString::new(SCENARIO.replace("\"latency_ms\": 1", "\"latency\": 1")).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ms_scenario_from_json(bad.as_ptr(), &mut s) }, MsStatus::Schema);
    assert!(s.is_null());
    assert!(last_error().starts_with("topology.links[0]"), "{}", last_error());
}

#[test]
fn unknown_variant_and_nulls() {
    let json = small(SCENARIO);
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { ms_scenario_from_json(json.as_ptr(), &mut s) }, MsStatus::Ok);
    let v = CString::new("teleport").unwrap();
    assert_eq!(unsafe { ms_scenario_set_variant(s, v.as_ptr()) }, MsStatus::UnknownVariant);
    assert_eq!(unsafe { ms_scenario_set_variant(s, ptr::null()) }, MsStatus::NullPointer);
    assert_eq!(unsafe { ms_scenario_run(ptr::null(), ptr::null_mut()) }, MsStatus::NullPointer);
    unsafe { ms_scenario_free(s) };
    unsafe { ms_scenario_free(ptr::null_mut()) };
}

#[test]
fn decision_table() {
    let json = CString::new(DECISION).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { ms_decide_csv(json.as_ptr(), &mut out) }, MsStatus::Ok);
    let text = unsafe { CStr::from_ptr(out) }.to_str().unwrap().to_string();
    unsafe { ms_string_free(out) };
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[1].starts_with("1000,C,1.500000,1.500000,1.000000,0.850000,2.700000,1.350000,C,"));
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/migrasim.h");
    for f in [
        "ms_last_error",
        "ms_version",
        "ms_string_free",
        "ms_variant_count",
        "ms_variant_name",
        "ms_scenario_from_json",
        "ms_scenario_free",
        "ms_scenario_set_seed",
        "ms_scenario_set_variant",
        "ms_scenario_run",
        "ms_report_free",
        "ms_report_metrics",
        "ms_report_csv",
        "ms_decide_csv",
        "typedef struct MsScenario MsScenario",
        "MS_STATUS_SCHEMA = 3",
    ] {
        assert!(header.contains(f), "{f}");
    }
    let version = unsafe { CStr::from_ptr(ms_version()) }.to_str().unwrap();
    assert_eq!(version, env!("CARGO_PKG_VERSION"));
}
