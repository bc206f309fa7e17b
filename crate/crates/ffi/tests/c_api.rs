use std::ffi::{CStr, CString};
use std::ptr;

use svmcheck_ffi::*;

unsafe fn take(s: *mut std::ffi::c_char) -> String {
    assert!(!s.is_null());
    let out = CStr::from_ptr(s).to_str().unwrap().to_string();
    svm_string_free(s);
    out
}

#[test]
fn corpus_round_trip_through_handles() {
    unsafe {
        let name = CString::new("vm_suspend_resume_original").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(svm_model_load_corpus(name.as_ptr(), &mut m), SvmStatus::Ok);
        assert_eq!(take(svm_model_name(m)), "vm_suspend_resume_original");
        let mut r = ptr::null_mut();
        assert_eq!(svm_verify(m, ptr::null(), &mut r), SvmStatus::Ok);
        assert_eq!(svm_report_verdict(r), 1);
        assert!(svm_report_states(r) > 0);
        let json: serde_json::Value = serde_json::from_str(&take(svm_report_json(r))).unwrap();
        assert_eq!(json["schema"], "report-v1");
        assert_eq!(json["verdict"]["verdict"], "fail");
        assert!(take(svm_report_text(r)).contains("replays"));
        svm_report_free(r);
        svm_model_free(m);
    }
}

#[test]
fn error_codes_and_messages() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(svm_model_parse(ptr::null(), &mut m), SvmStatus::NullArgument);
        assert!(m.is_null());

        let bad = CString::new("svm-format-version 1\nmodel x phase runtime scope\n").unwrap();
        assert_eq!(svm_model_parse(bad.as_ptr(), &mut m), SvmStatus::ParseError);
        assert!(take(svm_last_error()).contains("E_SYNTAX"));

        let nope = CString::new("nonexistent").unwrap();
        assert_eq!(svm_model_load_corpus(nope.as_ptr(), &mut m), SvmStatus::UnknownModel);
        assert!(take(svm_last_error()).contains("E_UNKNOWN_MODEL"));

        let latin1 = [0xffu8, 0xfe, 0];
        assert_eq!(svm_model_parse(latin1.as_ptr().cast(), &mut m), SvmStatus::InvalidUtf8);

        let mut r = ptr::null_mut();
        assert_eq!(svm_verify(ptr::null(), ptr::null(), &mut r), SvmStatus::NullArgument);
        assert_eq!(svm_report_verdict(ptr::null()), -1);
        assert!(svm_report_json(ptr::null()).is_null());

        let ok = CString::new("vm_startup").unwrap();
        assert_eq!(svm_model_load_corpus(ok.as_ptr(), &mut m), SvmStatus::Ok);
        assert!(svm_last_error().is_null());
        svm_model_free(m);
        svm_model_free(ptr::null_mut());
        svm_report_free(ptr::null_mut());
        svm_string_free(ptr::null_mut());
    }
}

#[test]
fn limits_are_honoured() {
    unsafe {
        let name = CString::new("vm_trust_evidence").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(svm_model_load_corpus(name.as_ptr(), &mut m), SvmStatus::Ok);
        let mut limits = svm_limits_default();
        limits.max_states = 5;
        let mut r = ptr::null_mut();
        assert_eq!(svm_verify(m, &limits, &mut r), SvmStatus::Ok);
        assert_eq!(svm_report_verdict(r), 2);
        svm_report_free(r);

        limits = svm_limits_default();
        limits.sessions = 1;
        limits.workers = 0;
        assert_eq!(svm_verify(m, &limits, &mut r), SvmStatus::Ok);
        assert_eq!(svm_report_verdict(r), 0);
        let json: serde_json::Value = serde_json::from_str(&take(svm_report_json(r))).unwrap();
        assert_eq!(json["parameters"]["sessions"], 1);
        svm_report_free(r);
        svm_model_free(m);
    }
}
