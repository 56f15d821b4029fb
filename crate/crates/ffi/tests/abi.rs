use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use authprop_ffi::*;

fn scenario_json(name: &str) -> CString {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/scenarios")
        .join(name);
    CString::new(std::fs::read_to_string(path).unwrap()).unwrap()
}

fn load(name: &str) -> *mut ApScenario {
    let json = scenario_json(name);
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { ap_scenario_from_json(json.as_ptr(), &mut s) },
        ApStatus::Ok
    );
    s
}

fn run(s: *const ApScenario, mode: ApMode, policy: ApPolicy) -> (*mut ApTrace, ApOutcome) {
    let mut t = ptr::null_mut();
    let mut o = ApOutcome {
        status: ApRunStatus::Completed,
        accesses_allowed: 0,
        accesses_denied: 0,
        deliveries: 0,
        records: 0,
    };
    assert_eq!(
        unsafe { ap_scenario_run(s, mode, policy, &mut t, &mut o) },
        ApStatus::Ok
    );
    (t, o)
}

fn take_string(p: *mut std::ffi::c_char) -> String {
    let s = unsafe { CStr::from_ptr(p) }.to_str().unwrap().to_string();
    unsafe { ap_string_free(p) };
    s
}

#[test]
fn due_diligence_roundtrip_through_bytes() {
    let s = load("due_diligence.json");
    let (t, o) = run(s, ApMode::Compliant, ApPolicy::Access);
    assert_eq!(o.status, ApRunStatus::CompletedPartial);
    assert_eq!(
        (o.accesses_allowed, o.accesses_denied, o.deliveries),
        (2, 1, 1)
    );
    assert_eq!(unsafe { ap_trace_len(t) }, o.records);

    let (mut p, mut n) = (ptr::null_mut(), 0usize);
    assert_eq!(
        unsafe { ap_trace_to_bytes(t, &mut p, &mut n) },
        ApStatus::Ok
    );
    let mut broken = 0i64;
    assert_eq!(unsafe { ap_verify_bytes(p, n, &mut broken) }, ApStatus::Ok);
    assert_eq!(broken, -1);

    let mut back = ptr::null_mut();
    assert_eq!(
        unsafe { ap_trace_from_bytes(p, n, &mut back) },
        ApStatus::Ok
    );
    let mut clean = -1;
    let mut json = ptr::null_mut();
    assert_eq!(
        unsafe { ap_trace_audit(back, &mut clean, &mut json) },
        ApStatus::Ok
    );
    assert_eq!(clean, 1);
    let verdict: serde_json::Value = serde_json::from_str(&take_string(json)).unwrap();
    assert_eq!(verdict["overall"], "clean");

    // A flipped body byte near the end is located or rejected.
    let bytes = unsafe { std::slice::from_raw_parts_mut(p, n) };
    bytes[n - 60] ^= 0x01;
    let status = unsafe { ap_verify_bytes(p, n, &mut broken) };
    assert!(status == ApStatus::IntegrityFailure || broken != -1);
    let mut rejected = ptr::null_mut();
    assert_eq!(
        unsafe { ap_trace_from_bytes(p, n, &mut rejected) },
        ApStatus::IntegrityFailure
    );
    assert!(rejected.is_null());

    unsafe {
        ap_bytes_free(p, n);
        ap_trace_free(back);
        ap_trace_free(t);
        ap_scenario_free(s);
    }
}

#[test]
fn legacy_nominal_delegation_audits_dirty_and_taints_delivery() {
    let s = load("nominal_delegation.json");
    let (t, o) = run(s, ApMode::Compliant, ApPolicy::Access);
    assert_eq!(o.status, ApRunStatus::Denied);
    unsafe { ap_trace_free(t) };

    let (t, o) = run(s, ApMode::Legacy, ApPolicy::Access);
    assert_eq!(o.status, ApRunStatus::Completed);
    let mut clean = -1;
    assert_eq!(
        unsafe { ap_trace_audit(t, &mut clean, ptr::null_mut()) },
        ApStatus::Ok
    );
    assert_eq!(clean, 0);

    let mut json = ptr::null_mut();
    assert_eq!(
        unsafe { ap_trace_taint(t, 0, &mut json) },
        ApStatus::BadOrigin
    );
    let msg = unsafe { CStr::from_ptr(ap_last_error()) }.to_str().unwrap();
    assert!(msg.contains("not an access"), "{msg}");
    unsafe {
        ap_trace_free(t);
        ap_scenario_free(s);
    }
}

#[test]
fn missing_policy_and_invalid_inputs() {
    let bad = CString::new(r#"{"schema_version": 7}"#).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(
        unsafe { ap_scenario_from_json(bad.as_ptr(), &mut s) },
        ApStatus::InvalidScenario
    );
    assert!(s.is_null());
    let mut m = ApRaceMetrics {
        unauthorized_ops_ttl: 0,
        unauthorized_ops_exec: 0,
        ratio: 0.0,
    };
    assert_eq!(
        unsafe { ap_revocation_race(1, 0, 5, 1, 10, &mut m) },
        ApStatus::InvalidArgument
    );
    assert!(!unsafe { CStr::from_ptr(ap_version()) }
        .to_bytes()
        .is_empty());
}

#[test]
fn header_declares_every_export() {
    let header =
        std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("include/authprop.h"))
            .unwrap();
    for f in [
        "ap_last_error",
        "ap_version",
        "ap_string_free",
        "ap_scenario_from_json",
        "ap_scenario_free",
        "ap_scenario_run",
        "ap_trace_from_bytes",
        "ap_trace_free",
        "ap_trace_len",
        "ap_trace_to_bytes",
        "ap_bytes_free",
        "ap_verify_bytes",
        "ap_trace_audit",
        "ap_trace_taint",
        "ap_revocation_race",
    ] {
        assert!(header.contains(&format!("{f}(")), "{f} missing from header");
    }
    assert!(header.contains("typedef struct ApTrace ApTrace;"));
}
