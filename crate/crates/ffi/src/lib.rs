//! C interface to svmcheck.
//!
//! Models and reports are opaque handles owned by the caller and released
//! with their `_free` functions. Every fallible call returns an `SvmStatus`;
//! the message for the most recent failure on the calling thread is available
//! from `svm_last_error`. Strings returned by this library are freed with
//! `svm_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::time::Instant;

use svmcheck::corpus::{self, CorpusError};
use svmcheck::engine::{Limits, DEFAULT_FAB_DEPTH, DEFAULT_MAX_DEPTH, DEFAULT_MAX_STATES};
use svmcheck::invariants::{verify, Verdict};
use svmcheck::model::ProtocolModel;
use svmcheck::report::RunReport;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SvmStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    UnknownModel = 4,
    EngineError = 5,
    Panic = 6,
}

/// Search limits. `sessions == 0` keeps the model's own session count;
/// `workers == 0` uses one thread per core.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct SvmLimits {
    pub max_states: usize,
    pub max_depth: usize,
    pub sessions: u32,
    pub fab_depth: usize,
    pub workers: usize,
}

pub struct SvmModel {
    model: ProtocolModel,
}

pub struct SvmReport {
    report: RunReport,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn clear_error() {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
}

fn guard(f: impl FnOnce() -> SvmStatus) -> SvmStatus {
    clear_error();
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal error: {msg}"));
            SvmStatus::Panic
        }
    }
}

unsafe fn read_str<'a>(p: *const c_char) -> Result<&'a str, SvmStatus> {
    if p.is_null() {
        set_error("null string argument");
        return Err(SvmStatus::NullArgument);
    }
    CStr::from_ptr(p).to_str().map_err(|e| {
        set_error(format!("argument is not UTF-8: {e}"));
        SvmStatus::InvalidUtf8
    })
}

fn to_c(s: String) -> *mut c_char {
    CString::new(s.replace('\0', " ")).map_or(ptr::null_mut(), CString::into_raw)
}

#[no_mangle]
pub extern "C" fn svm_limits_default() -> SvmLimits {
    SvmLimits {
        max_states: DEFAULT_MAX_STATES,
        max_depth: DEFAULT_MAX_DEPTH,
        sessions: 0,
        fab_depth: DEFAULT_FAB_DEPTH,
        workers: 1,
    }
}

/// Parses model text. On success `*out` holds a new model.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn svm_model_parse(text: *const c_char, out: *mut *mut SvmModel) -> SvmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SvmStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let text = match read_str(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match svmcheck::format::parse(text) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SvmModel { model }));
                SvmStatus::Ok
            }
            Err(ds) => {
                set_error(ds.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("\n"));
                SvmStatus::ParseError
            }
        }
    })
}

/// Loads a bundled model by name.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn svm_model_load_corpus(name: *const c_char, out: *mut *mut SvmModel) -> SvmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SvmStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let name = match read_str(name) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match corpus::load(name) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(SvmModel { model }));
                SvmStatus::Ok
            }
            Err(e @ CorpusError::UnknownModel(_)) => {
                set_error(e.to_string());
                SvmStatus::UnknownModel
            }
            Err(e) => {
                set_error(e.to_string());
                SvmStatus::ParseError
            }
        }
    })
}

/// # Safety
/// `model` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn svm_model_free(model: *mut SvmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Model name as a new string, or null.
///
/// # Safety
/// `model` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svm_model_name(model: *const SvmModel) -> *mut c_char {
    match model.as_ref() {
        Some(m) => to_c(m.model.name.clone()),
        None => ptr::null_mut(),
    }
}

/// Verifies a model. `limits` may be null for defaults.
///
/// # Safety
/// `model` must be a live handle, `limits` null or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn svm_verify(
    model: *const SvmModel,
    limits: *const SvmLimits,
    out: *mut *mut SvmReport,
) -> SvmStatus {
    guard(|| {
        if out.is_null() {
            set_error("null output pointer");
            return SvmStatus::NullArgument;
        }
        *out = ptr::null_mut();
        let Some(m) = model.as_ref() else {
            set_error("null model");
            return SvmStatus::NullArgument;
        };
        let l = limits.as_ref().copied().unwrap_or_else(|| svm_limits_default());
        let limits = Limits {
            max_states: l.max_states,
            max_depth: l.max_depth,
            sessions: (l.sessions != 0).then_some(l.sessions),
            fab_depth: l.fab_depth,
            workers: if l.workers == 0 {
                std::thread::available_parallelism().map_or(1, |n| n.get())
            } else {
                l.workers
            },
            ..Limits::default()
        };
        let start = Instant::now();
        match verify(&m.model, &limits) {
            Ok(outcome) => {
                let ms = start.elapsed().as_secs_f64() * 1000.0;
                let report = RunReport::new(&m.model.name, &outcome, &limits, ms);
                *out = Box::into_raw(Box::new(SvmReport { report }));
                SvmStatus::Ok
            }
            Err(e) => {
                set_error(e.to_string());
                SvmStatus::EngineError
            }
        }
    })
}

/// 0 pass, 1 fail, 2 inconclusive, -1 for a null report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svm_report_verdict(report: *const SvmReport) -> i32 {
    match report.as_ref().map(|r| &r.report.verdict) {
        Some(Verdict::Pass) => 0,
        Some(Verdict::Fail { .. }) => 1,
        Some(Verdict::Inconclusive { .. }) => 2,
        None => -1,
    }
}

/// Number of reachable states explored, 0 for a null report.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svm_report_states(report: *const SvmReport) -> usize {
    report.as_ref().map_or(0, |r| r.report.states.reachable)
}

/// The report as JSON, or null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svm_report_json(report: *const SvmReport) -> *mut c_char {
    match report.as_ref() {
        Some(r) => to_c(r.report.to_json()),
        None => ptr::null_mut(),
    }
}

/// The report as human-readable text, or null.
///
/// # Safety
/// `report` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn svm_report_text(report: *const SvmReport) -> *mut c_char {
    match report.as_ref() {
        Some(r) => to_c(r.report.to_text()),
        None => ptr::null_mut(),
    }
}

/// # Safety
/// `report` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn svm_report_free(report: *mut SvmReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}

/// Copy of the last error message on this thread, or null if the last call
/// succeeded.
#[no_mangle]
pub extern "C" fn svm_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |s| s.clone().into_raw()))
}

/// # Safety
/// `s` must be null or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn svm_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
