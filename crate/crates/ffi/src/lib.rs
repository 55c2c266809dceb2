//! C ABI over the tripwire engine.
//!
//! Traces and outcomes are opaque handles owned by the caller and released
//! with the matching `*_free` function. Every fallible call returns a
//! [`TwStatus`]; on failure `tw_last_error` describes the problem for the
//! calling thread. Strings returned by this library must be released with
//! `tw_string_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::ptr;

use tripwire::{
    classify, emit_json, emit_text, parse_trace, run, CallCategory, Detectors, EngineConfig, HeapGeometry,
    ReportKind, RunOutcome, TraceEvent,
};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    ParseError = 3,
    ConfigError = 4,
    EngineError = 5,
    OutOfRange = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TwReportKind {
    Overflow = 0,
    UseAfterFree = 1,
    Leak = 2,
    DoubleFree = 3,
    Segfault = 4,
    ReachableFreed = 5,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TwCallCategory {
    Repeatable = 0,
    Recordable = 1,
    Revocable = 2,
    Deferrable = 3,
    Irrevocable = 4,
}

pub const TW_DETECT_OVERFLOW: u32 = 1;
pub const TW_DETECT_UAF: u32 = 2;
pub const TW_DETECT_LEAK: u32 = 4;

/// Engine settings. Fill with `tw_config_default` before changing fields.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct TwConfig {
    /// Bitwise OR of `TW_DETECT_*`.
    pub detectors: u32,
    pub quarantine_max_bytes: u64,
    pub quarantine_max_count: u64,
    pub uaf_fill_prefix: u64,
    pub canary_byte: u8,
    pub max_watchpoints: usize,
    pub dangling: bool,
    pub heap_base: u64,
    pub heap_size: u64,
    pub globals_base: u64,
    pub globals_words: u64,
}

impl From<&EngineConfig> for TwConfig {
    fn from(c: &EngineConfig) -> Self {
        let d = c.detectors;
        TwConfig {
            detectors: [(d.overflow, TW_DETECT_OVERFLOW), (d.uaf, TW_DETECT_UAF), (d.leak, TW_DETECT_LEAK)]
                .iter()
                .filter(|(on, _)| *on)
                .fold(0, |acc, (_, bit)| acc | bit),
            quarantine_max_bytes: c.quarantine_max_bytes,
            quarantine_max_count: c.quarantine_max_count,
            uaf_fill_prefix: c.uaf_fill_prefix,
            canary_byte: c.canary_byte,
            max_watchpoints: c.max_watchpoints,
            dangling: c.dangling,
            heap_base: c.geometry.heap_base,
            heap_size: c.geometry.heap_size,
            globals_base: c.geometry.globals_base,
            globals_words: c.geometry.globals_words,
        }
    }
}

impl From<&TwConfig> for EngineConfig {
    fn from(c: &TwConfig) -> Self {
        EngineConfig {
            detectors: Detectors {
                overflow: c.detectors & TW_DETECT_OVERFLOW != 0,
                uaf: c.detectors & TW_DETECT_UAF != 0,
                leak: c.detectors & TW_DETECT_LEAK != 0,
            },
            quarantine_max_bytes: c.quarantine_max_bytes,
            quarantine_max_count: c.quarantine_max_count,
            uaf_fill_prefix: c.uaf_fill_prefix,
            canary_byte: c.canary_byte,
            max_watchpoints: c.max_watchpoints,
            dangling: c.dangling,
            geometry: HeapGeometry {
                heap_base: c.heap_base,
                heap_size: c.heap_size,
                globals_base: c.globals_base,
                globals_words: c.globals_words,
                ..HeapGeometry::default()
            },
        }
    }
}

/// A parsed trace.
pub struct TwTrace {
    events: Vec<TraceEvent>,
}

/// The result of running a trace.
pub struct TwOutcome {
    outcome: RunOutcome,
    config: EngineConfig,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: TwStatus, msg: impl Into<String>) -> TwStatus {
    let msg = CString::new(msg.into().replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
    status
}

fn guarded(f: impl FnOnce() -> TwStatus) -> TwStatus {
    match std::panic::catch_unwind(std::panic::AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(TwStatus::Panic, "internal panic"),
    }
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, TwStatus> {
    if p.is_null() {
        return Err(fail(TwStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p).to_str().map_err(|_| fail(TwStatus::InvalidUtf8, "string argument is not UTF-8"))
}

fn into_c_string(s: String) -> *mut c_char {
    CString::new(s).map(CString::into_raw).unwrap_or(ptr::null_mut())
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn tw_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// # Safety
/// `out` must be NULL or point to writable memory for a `TwConfig`.
#[no_mangle]
pub unsafe extern "C" fn tw_config_default(out: *mut TwConfig) -> TwStatus {
    if out.is_null() {
        return fail(TwStatus::NullPointer, "null config");
    }
    out.write(TwConfig::from(&EngineConfig::default()));
    TwStatus::Ok
}

/// Parses trace text. On success `*out` receives a handle to release with
/// `tw_trace_free`.
///
/// # Safety
/// `text` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn tw_trace_parse(text: *const c_char, out: *mut *mut TwTrace) -> TwStatus {
    guarded(|| {
        if out.is_null() {
            return fail(TwStatus::NullPointer, "null output handle");
        }
        let text = match str_arg(text) {
            Ok(t) => t,
            Err(s) => return s,
        };
        match parse_trace(text) {
            Ok(events) => {
                out.write(Box::into_raw(Box::new(TwTrace { events })));
                TwStatus::Ok
            }
            Err(e) => fail(TwStatus::ParseError, e.to_string()),
        }
    })
}

/// # Safety
/// `trace` must be NULL or a live handle from `tw_trace_parse`.
#[no_mangle]
pub unsafe extern "C" fn tw_trace_event_count(trace: *const TwTrace) -> usize {
    trace.as_ref().map_or(0, |t| t.events.len())
}

/// # Safety
/// `trace` must be NULL or a handle from `tw_trace_parse` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tw_trace_free(trace: *mut TwTrace) {
    if !trace.is_null() {
        drop(Box::from_raw(trace));
    }
}

/// Runs a trace. A NULL `config` uses the defaults. On success `*out`
/// receives a handle to release with `tw_outcome_free`.
///
/// # Safety
/// `trace` must be a live trace handle, `config` NULL or valid, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tw_run(trace: *const TwTrace, config: *const TwConfig, out: *mut *mut TwOutcome) -> TwStatus {
    guarded(|| {
        let (Some(trace), false) = (trace.as_ref(), out.is_null()) else {
            return fail(TwStatus::NullPointer, "null trace or output handle");
        };
        let config = config.as_ref().map_or_else(EngineConfig::default, EngineConfig::from);
        if let Err(e) = config.validate() {
            return fail(TwStatus::ConfigError, e.to_string());
        }
        match run(&trace.events, &config) {
            Ok(outcome) => {
                out.write(Box::into_raw(Box::new(TwOutcome { outcome, config })));
                TwStatus::Ok
            }
            Err(e) => fail(TwStatus::EngineError, e.to_string()),
        }
    })
}

/// # Safety
/// `outcome` must be NULL or a handle from `tw_run` not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_free(outcome: *mut TwOutcome) {
    if !outcome.is_null() {
        drop(Box::from_raw(outcome));
    }
}

/// # Safety
/// `outcome` must be NULL or a live outcome handle.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_report_count(outcome: *const TwOutcome) -> usize {
    outcome.as_ref().map_or(0, |o| o.outcome.reports.len())
}

/// # Safety
/// `outcome` must be NULL or a live outcome handle.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_epochs(outcome: *const TwOutcome) -> usize {
    outcome.as_ref().map_or(0, |o| o.outcome.epochs)
}

/// # Safety
/// `outcome` must be a live outcome handle and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_report_kind(
    outcome: *const TwOutcome,
    index: usize,
    out: *mut TwReportKind,
) -> TwStatus {
    let (Some(o), false) = (outcome.as_ref(), out.is_null()) else {
        return fail(TwStatus::NullPointer, "null outcome or output");
    };
    let Some(r) = o.outcome.reports.get(index) else {
        return fail(TwStatus::OutOfRange, format!("report {index} of {}", o.outcome.reports.len()));
    };
    out.write(match r.kind {
        ReportKind::Overflow => TwReportKind::Overflow,
        ReportKind::UseAfterFree => TwReportKind::UseAfterFree,
        ReportKind::Leak => TwReportKind::Leak,
        ReportKind::DoubleFree => TwReportKind::DoubleFree,
        ReportKind::Segfault => TwReportKind::Segfault,
        ReportKind::ReachableFreed => TwReportKind::ReachableFreed,
    });
    TwStatus::Ok
}

/// Copies the 32-byte final state hash into `out`.
///
/// # Safety
/// `outcome` must be a live outcome handle and `out` point to 32 bytes.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_state_hash(outcome: *const TwOutcome, out: *mut u8) -> TwStatus {
    let (Some(o), false) = (outcome.as_ref(), out.is_null()) else {
        return fail(TwStatus::NullPointer, "null outcome or output");
    };
    ptr::copy_nonoverlapping(o.outcome.state_hash.0.as_ptr(), out, 32);
    TwStatus::Ok
}

/// Human-readable report listing, or NULL for a NULL handle.
///
/// # Safety
/// `outcome` must be NULL or a live outcome handle.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_text(outcome: *const TwOutcome) -> *mut c_char {
    outcome.as_ref().map_or(ptr::null_mut(), |o| into_c_string(emit_text(&o.outcome.reports)))
}

/// JSON document with reports, configuration, epoch count and state hash.
///
/// # Safety
/// `outcome` must be NULL or a live outcome handle.
#[no_mangle]
pub unsafe extern "C" fn tw_outcome_json(outcome: *const TwOutcome) -> *mut c_char {
    outcome
        .as_ref()
        .map_or(ptr::null_mut(), |o| into_c_string(emit_json(&o.outcome.reports, &o.outcome.meta(&o.config))))
}

/// # Safety
/// `s` must be NULL or a string returned by this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn tw_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Category of an external call with the given arguments.
///
/// # Safety
/// `name` must be a NUL-terminated string, `args` NULL (with `nargs` 0) or
/// an array of `nargs` NUL-terminated strings, and `out` valid.
#[no_mangle]
pub unsafe extern "C" fn tw_classify_call(
    name: *const c_char,
    args: *const *const c_char,
    nargs: usize,
    out: *mut TwCallCategory,
) -> TwStatus {
    if out.is_null() || (args.is_null() && nargs > 0) {
        return fail(TwStatus::NullPointer, "null output or argument array");
    }
    let name = match str_arg(name) {
        Ok(n) => n,
        Err(s) => return s,
    };
    let mut list = Vec::with_capacity(nargs);
    for i in 0..nargs {
        match str_arg(*args.add(i)) {
            Ok(a) => list.push(a),
            Err(s) => return s,
        }
    }
    out.write(match classify(name, &list) {
        CallCategory::Repeatable => TwCallCategory::Repeatable,
        CallCategory::Recordable => TwCallCategory::Recordable,
        CallCategory::Revocable => TwCallCategory::Revocable,
        CallCategory::Deferrable => TwCallCategory::Deferrable,
        CallCategory::Irrevocable => TwCallCategory::Irrevocable,
    });
    TwStatus::Ok
}
