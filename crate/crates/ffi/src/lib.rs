//! C ABI over the authprop engine.
//!
//! Handles are opaque and owned by the caller once returned; release them
//! with the matching `_free` function. Every fallible call returns an
//! [`ApStatus`]; on failure `ap_last_error()` describes the cause for the
//! calling thread. Strings handed out by the library are NUL-terminated
//! UTF-8 and must be released with `ap_string_free`.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use authprop::audit::{audit, taint};
use authprop::simulator::{
    revocation_race, run_scenario_with_policy, EngineMode, RaceConfig, Scenario, SimError,
};
use authprop::trace::{verify_bytes, IntegrityVerdict, WorkflowTrace};
use authprop::workflow::{ExecutionStatus, TemporalPolicy};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidScenario = 3,
    MissingPolicy = 4,
    ExecutionError = 5,
    IntegrityFailure = 6,
    BadOrigin = 7,
    InvalidArgument = 8,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApMode {
    Compliant = 0,
    Legacy = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApPolicy {
    Initiation = 0,
    Access = 1,
    Completion = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApRunStatus {
    Completed = 0,
    CompletedPartial = 1,
    Denied = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ApOutcome {
    pub status: ApRunStatus,
    pub accesses_allowed: u64,
    pub accesses_denied: u64,
    pub deliveries: u64,
    pub records: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ApRaceMetrics {
    pub unauthorized_ops_ttl: u64,
    pub unauthorized_ops_exec: u64,
    /// Negative when the execution-count lane admitted nothing.
    pub ratio: f64,
}

/// Opaque parsed scenario.
pub struct ApScenario(Scenario);

/// Opaque workflow trace.
pub struct ApTrace(WorkflowTrace);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(CString::new(msg).expect("NULs removed")));
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn fail(status: ApStatus, msg: impl Into<String>) -> ApStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> ApStatus) -> ApStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(ApStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, ApStatus> {
    if p.is_null() {
        return Err(fail(ApStatus::NullArgument, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| fail(ApStatus::InvalidUtf8, e.to_string()))
}

fn out_string(s: String, out: *mut *mut c_char) -> ApStatus {
    let c = CString::new(s.replace('\0', " ")).expect("NULs removed");
    unsafe { *out = c.into_raw() };
    ApStatus::Ok
}

/// Message for the last failed call on this thread, or NULL. Valid until
/// the next call into the library from this thread.
#[no_mangle]
pub extern "C" fn ap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Static version string.
#[no_mangle]
pub extern "C" fn ap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

#[no_mangle]
pub unsafe extern "C" fn ap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses and validates a scenario document.
#[no_mangle]
pub unsafe extern "C" fn ap_scenario_from_json(
    json: *const c_char,
    out: *mut *mut ApScenario,
) -> ApStatus {
    guard(|| {
        if out.is_null() {
            return fail(ApStatus::NullArgument, "null output pointer");
        }
        let text = match str_arg(json) {
            Ok(t) => t,
            Err(s) => return s,
        };
        let scenario = match Scenario::from_json(text) {
            Ok(s) => s,
            Err(e) => return fail(ApStatus::InvalidScenario, e.to_string()),
        };
        let problems = scenario.validate();
        if !problems.is_empty() {
            return fail(ApStatus::InvalidScenario, problems.join("; "));
        }
        *out = Box::into_raw(Box::new(ApScenario(scenario)));
        ApStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn ap_scenario_free(s: *mut ApScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Runs a scenario. `out_trace` receives a new trace handle; `out_outcome`
/// may be NULL.
#[no_mangle]
pub unsafe extern "C" fn ap_scenario_run(
    scenario: *const ApScenario,
    mode: ApMode,
    policy: ApPolicy,
    out_trace: *mut *mut ApTrace,
    out_outcome: *mut ApOutcome,
) -> ApStatus {
    guard(|| {
        if scenario.is_null() || out_trace.is_null() {
            return fail(ApStatus::NullArgument, "null scenario or output pointer");
        }
        let mode = match mode {
            ApMode::Compliant => EngineMode::Compliant,
            ApMode::Legacy => EngineMode::LegacyBuggy,
        };
        let policy = match policy {
            ApPolicy::Initiation => TemporalPolicy::InitiationTime,
            ApPolicy::Access => TemporalPolicy::AccessTime,
            ApPolicy::Completion => TemporalPolicy::CompletionTime,
        };
        let run = match run_scenario_with_policy(&(*scenario).0, mode, policy) {
            Ok(r) => r,
            Err(e @ SimError::InvalidScenario(_)) => {
                return fail(ApStatus::InvalidScenario, e.to_string())
            }
            Err(e @ SimError::MissingPolicy) => {
                return fail(ApStatus::MissingPolicy, e.to_string())
            }
            Err(e) => return fail(ApStatus::ExecutionError, e.to_string()),
        };
        if !out_outcome.is_null() {
            *out_outcome = ApOutcome {
                status: match run.result.status {
                    ExecutionStatus::Completed => ApRunStatus::Completed,
                    ExecutionStatus::CompletedPartial { .. } => ApRunStatus::CompletedPartial,
                    ExecutionStatus::Denied { .. } => ApRunStatus::Denied,
                },
                accesses_allowed: run.metrics.accesses_allowed as u64,
                accesses_denied: run.metrics.accesses_denied as u64,
                deliveries: run.metrics.deliveries as u64,
                records: run.metrics.records as u64,
            };
        }
        *out_trace = Box::into_raw(Box::new(ApTrace(run.trace)));
        ApStatus::Ok
    })
}

/// Decodes a binary trace, refusing it unless the hash chain is intact.
#[no_mangle]
pub unsafe extern "C" fn ap_trace_from_bytes(
    data: *const u8,
    len: usize,
    out: *mut *mut ApTrace,
) -> ApStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return fail(ApStatus::NullArgument, "null data or output pointer");
        }
        match WorkflowTrace::from_bytes(std::slice::from_raw_parts(data, len)) {
            Ok(t) => {
                *out = Box::into_raw(Box::new(ApTrace(t)));
                ApStatus::Ok
            }
            Err(e) => fail(ApStatus::IntegrityFailure, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ap_trace_free(t: *mut ApTrace) {
    if !t.is_null() {
        drop(Box::from_raw(t));
    }
}

#[no_mangle]
pub unsafe extern "C" fn ap_trace_len(t: *const ApTrace) -> u64 {
    if t.is_null() {
        return 0;
    }
    (*t).0.len() as u64
}

/// Canonical binary encoding. Release with `ap_bytes_free(ptr, len)`.
#[no_mangle]
pub unsafe extern "C" fn ap_trace_to_bytes(
    t: *const ApTrace,
    out_ptr: *mut *mut u8,
    out_len: *mut usize,
) -> ApStatus {
    guard(|| {
        if t.is_null() || out_ptr.is_null() || out_len.is_null() {
            return fail(ApStatus::NullArgument, "null trace or output pointer");
        }
        let bytes = (*t).0.to_bytes().into_boxed_slice();
        *out_len = bytes.len();
        *out_ptr = Box::into_raw(bytes).cast();
        ApStatus::Ok
    })
}

#[no_mangle]
pub unsafe extern "C" fn ap_bytes_free(p: *mut u8, len: usize) {
    if !p.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(p, len)));
    }
}

/// Checks the hash chain of an encoded trace. On success `out_broken_at`
/// is -1 when intact, the first bad record otherwise, or -2 when the
/// header was tampered with. Malformed framing returns `IntegrityFailure`.
#[no_mangle]
pub unsafe extern "C" fn ap_verify_bytes(
    data: *const u8,
    len: usize,
    out_broken_at: *mut i64,
) -> ApStatus {
    guard(|| {
        if data.is_null() || out_broken_at.is_null() {
            return fail(ApStatus::NullArgument, "null data or output pointer");
        }
        match verify_bytes(std::slice::from_raw_parts(data, len)) {
            Ok(IntegrityVerdict::Intact) => *out_broken_at = -1,
            Ok(IntegrityVerdict::BrokenAt(i)) => *out_broken_at = i as i64,
            Ok(IntegrityVerdict::HeaderTampered) => *out_broken_at = -2,
            Err(e) => return fail(ApStatus::IntegrityFailure, e.to_string()),
        }
        ApStatus::Ok
    })
}

/// Audits a trace. `out_clean` is set to 1 or 0; `out_json`, if not NULL,
/// receives the full verdict as JSON.
#[no_mangle]
pub unsafe extern "C" fn ap_trace_audit(
    t: *const ApTrace,
    out_clean: *mut i32,
    out_json: *mut *mut c_char,
) -> ApStatus {
    guard(|| {
        if t.is_null() || out_clean.is_null() {
            return fail(ApStatus::NullArgument, "null trace or output pointer");
        }
        let verdict = match audit(&(*t).0) {
            Ok(v) => v,
            Err(e) => return fail(ApStatus::IntegrityFailure, e.to_string()),
        };
        *out_clean = verdict.is_clean() as i32;
        if !out_json.is_null() {
            return out_string(
                serde_json::to_string(&verdict).expect("verdict serializes"),
                out_json,
            );
        }
        ApStatus::Ok
    })
}

/// Taint report for the access record `origin`, as JSON.
#[no_mangle]
pub unsafe extern "C" fn ap_trace_taint(
    t: *const ApTrace,
    origin: u64,
    out_json: *mut *mut c_char,
) -> ApStatus {
    guard(|| {
        if t.is_null() || out_json.is_null() {
            return fail(ApStatus::NullArgument, "null trace or output pointer");
        }
        match taint(&(*t).0, origin) {
            Ok(r) => out_string(
                serde_json::to_string(&r).expect("report serializes"),
                out_json,
            ),
            Err(e) => fail(ApStatus::BadOrigin, e.to_string()),
        }
    })
}

#[no_mangle]
pub unsafe extern "C" fn ap_revocation_race(
    velocity: u64,
    ttl: u64,
    exec_count: u64,
    revoke_at: u64,
    horizon: u64,
    out: *mut ApRaceMetrics,
) -> ApStatus {
    guard(|| {
        if out.is_null() {
            return fail(ApStatus::NullArgument, "null output pointer");
        }
        let config = RaceConfig {
            velocity,
            ttl,
            exec_count,
            revoke_at,
            horizon,
        };
        match revocation_race(config) {
            Ok(m) => {
                *out = ApRaceMetrics {
                    unauthorized_ops_ttl: m.unauthorized_ops_ttl,
                    unauthorized_ops_exec: m.unauthorized_ops_exec,
                    ratio: m.ratio.unwrap_or(-1.0),
                };
                ApStatus::Ok
            }
            Err(e) => fail(ApStatus::InvalidArgument, e.to_string()),
        }
    })
}
