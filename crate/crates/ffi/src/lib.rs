//! C ABI over the simulator.
//!
//! Every function returns an [`MsStatus`]; on failure the message is kept
//! per thread and read with [`ms_last_error`]. Handles are opaque and must be
//! released with their `_free` function. Strings returned through `char **`
//! are owned by the caller and released with [`ms_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use migrasim::algorithms::AlgorithmVariant;
use migrasim::metrics::{write_csv, MetricsRecord};
use migrasim::scenario::{DecisionScenario, Overrides, RunResult, Scenario, ScenarioError};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MsStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    /// Malformed or inconsistent scenario.
    Schema = 3,
    /// The simulation itself failed.
    Runtime = 4,
    UnknownVariant = 5,
    /// No migration ran, so there is nothing to report.
    NoMigration = 6,
    Panic = 7,
}

/// A parsed scenario.
pub struct MsScenario {
    inner: Scenario,
}

/// The outcome of one run.
pub struct MsReport {
    inner: RunResult,
}

/// Numeric cost metrics of a migration. Times are in seconds.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MsMetrics {
    pub completed: bool,
    pub correct: bool,
    pub freeze_time: f64,
    pub state_movement_time: f64,
    pub extraction_time: f64,
    pub loading_time: f64,
    pub bytes_state_moved: u64,
    pub bytes_replicated: u64,
    pub bytes_duplicated_upstream: u64,
    pub control_messages: u64,
    pub affected_tuples: u64,
    pub duplicate_outputs_dropped: u64,
    pub duplicate_outputs_accepted: u64,
    pub tuples_lost: u64,
    pub max_added_latency: f64,
    pub mean_added_latency: f64,
    pub migration_span: f64,
    pub sink_outputs: u64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn fail(status: MsStatus, msg: impl Into<String>) -> MsStatus {
    set_error(msg);
    status
}

fn from_scenario_error(e: ScenarioError) -> MsStatus {
    let status = if e.is_invalid_input() { MsStatus::Schema } else { MsStatus::Runtime };
    fail(status, e.to_string())
}

fn guard(f: impl FnOnce() -> MsStatus) -> MsStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            fail(MsStatus::Panic, msg)
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, MsStatus> {
    if p.is_null() {
        return Err(fail(MsStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|e| fail(MsStatus::InvalidUtf8, e.to_string()))
}

unsafe fn give_string(s: String, out: *mut *mut c_char) -> MsStatus {
    match CString::new(s) {
        Ok(c) => {
            *out = c.into_raw();
            MsStatus::Ok
        }
        Err(e) => fail(MsStatus::Runtime, e.to_string()),
    }
}

/// Message of the last failed call on this thread, or null. Valid until the
/// next call on the same thread.
#[no_mangle]
pub extern "C" fn ms_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ms_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` must come from this library or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Number of built-in migration variants.
#[no_mangle]
pub extern "C" fn ms_variant_count() -> usize {
    AlgorithmVariant::ALL.len()
}

/// Name of variant `i`, static storage; null when out of range.
#[no_mangle]
pub extern "C" fn ms_variant_name(i: usize) -> *const c_char {
    const NAMES: [&str; 7] = [
        "pause-drain-resume\0",
        "single-track-all-at-once\0",
        "single-track-partial\0",
        "checkpoint-assisted-single-track\0",
        "window-recreation\0",
        "state-recreation\0",
        "checkpoint-assisted-parallel-track\0",
    ];
    NAMES.get(i).map_or(ptr::null(), |s| s.as_ptr().cast())
}

/// Parses and validates a scenario.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_scenario_from_json(json: *const c_char, out: *mut *mut MsScenario) -> MsStatus {
    guard(|| {
        if out.is_null() {
            return fail(MsStatus::NullPointer, "null output pointer");
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match Scenario::parse(text) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MsScenario { inner }));
                MsStatus::Ok
            }
            Err(e) => from_scenario_error(e),
        }
    })
}

/// # Safety
/// `s` must come from [`ms_scenario_from_json`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_scenario_free(s: *mut MsScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Overrides the workload seed.
///
/// # Safety
/// `s` must be a live scenario handle.
#[no_mangle]
pub unsafe extern "C" fn ms_scenario_set_seed(s: *mut MsScenario, seed: u64) -> MsStatus {
    guard(|| match s.as_mut() {
        Some(s) => {
            s.inner = s.inner.with_overrides(&Overrides { seed: Some(seed), variant: None });
            MsStatus::Ok
        }
        None => fail(MsStatus::NullPointer, "null scenario"),
    })
}

/// Replaces the migration variant, by kebab-case or PascalCase name.
///
/// # Safety
/// `s` must be a live scenario handle and `name` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ms_scenario_set_variant(s: *mut MsScenario, name: *const c_char) -> MsStatus {
    guard(|| {
        let Some(s) = s.as_mut() else {
            return fail(MsStatus::NullPointer, "null scenario");
        };
        let name = match read_str(name) {
            Ok(n) => n,
            Err(st) => return st,
        };
        match name.parse::<AlgorithmVariant>() {
            Ok(v) => {
                if s.inner.migration.is_none() {
                    return fail(MsStatus::Schema, "scenario has no migration section");
                }
                s.inner = s.inner.with_overrides(&Overrides { seed: None, variant: Some(v) });
                MsStatus::Ok
            }
            Err(e) => fail(MsStatus::UnknownVariant, e.to_string()),
        }
    })
}

/// Runs the scenario. A run that violates correctness still returns
/// `Ok`; check `correct` in [`ms_report_metrics`].
///
/// # Safety
/// `s` must be a live scenario handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_scenario_run(s: *const MsScenario, out: *mut *mut MsReport) -> MsStatus {
    guard(|| {
        let Some(s) = s.as_ref() else {
            return fail(MsStatus::NullPointer, "null scenario");
        };
        if out.is_null() {
            return fail(MsStatus::NullPointer, "null output pointer");
        }
        match s.inner.run() {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(MsReport { inner }));
                MsStatus::Ok
            }
            Err(e) => from_scenario_error(e),
        }
    })
}

/// # Safety
/// `r` must come from [`ms_scenario_run`] or be null.
#[no_mangle]
pub unsafe extern "C" fn ms_report_free(r: *mut MsReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

fn record(r: &MsReport) -> Result<&MetricsRecord, MsStatus> {
    r.inner.report.as_ref().map(|rep| &rep.metrics).ok_or_else(|| fail(MsStatus::NoMigration, "the run performed no migration"))
}

/// # Safety
/// `r` must be a live report handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_report_metrics(r: *const MsReport, out: *mut MsMetrics) -> MsStatus {
    guard(|| {
        let (Some(r), Some(out)) = (r.as_ref(), out.as_mut()) else {
            return fail(MsStatus::NullPointer, "null argument");
        };
        let m = match record(r) {
            Ok(m) => m,
            Err(s) => return s,
        };
        *out = MsMetrics {
            completed: m.completed,
            correct: r.inner.is_correct(),
            freeze_time: m.freeze_time,
            state_movement_time: m.state_movement_time,
            extraction_time: m.extraction_time,
            loading_time: m.loading_time,
            bytes_state_moved: m.bytes_state_moved,
            bytes_replicated: m.bytes_replicated,
            bytes_duplicated_upstream: m.bytes_duplicated_upstream,
            control_messages: m.control_messages,
            affected_tuples: m.affected_tuples,
            duplicate_outputs_dropped: m.duplicate_outputs_dropped,
            duplicate_outputs_accepted: m.duplicate_outputs_accepted,
            tuples_lost: m.tuples_lost,
            max_added_latency: m.max_added_latency,
            mean_added_latency: m.mean_added_latency,
            migration_span: m.migration_span,
            sink_outputs: m.sink_outputs,
        };
        MsStatus::Ok
    })
}

/// The metrics as a CSV document with a header row.
///
/// # Safety
/// `r` must be a live report handle and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_report_csv(r: *const MsReport, out: *mut *mut c_char) -> MsStatus {
    guard(|| {
        let Some(r) = r.as_ref() else {
            return fail(MsStatus::NullPointer, "null report");
        };
        if out.is_null() {
            return fail(MsStatus::NullPointer, "null output pointer");
        }
        let m = match record(r) {
            Ok(m) => m,
            Err(s) => return s,
        };
        let mut buf = Vec::new();
        if let Err(e) = write_csv(&mut buf, std::slice::from_ref(m)) {
            return fail(MsStatus::Runtime, e.to_string());
        }
        give_string(String::from_utf8_lossy(&buf).into_owned(), out)
    })
}

/// Evaluates a decision scenario and returns the decision table as CSV.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ms_decide_csv(json: *const c_char, out: *mut *mut c_char) -> MsStatus {
    guard(|| {
        if out.is_null() {
            return fail(MsStatus::NullPointer, "null output pointer");
        }
        let text = match read_str(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let table = match DecisionScenario::parse(text).and_then(|d| d.decide()) {
            Ok(t) => t,
            Err(e) => return from_scenario_error(e),
        };
        let mut buf = Vec::new();
        if let Err(e) = table.write_csv(&mut buf) {
            return fail(MsStatus::Runtime, e.to_string());
        }
        give_string(String::from_utf8_lossy(&buf).into_owned(), out)
    })
}
