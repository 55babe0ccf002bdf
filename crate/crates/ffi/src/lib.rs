//! C ABI for the cold-start embedding laboratory.
//!
//! Conventions: handles are opaque pointers created and freed here; every
//! fallible call returns a [`CometaStatus`] and writes results through out
//! pointers; strings returned to the caller are NUL-terminated, allocated
//! by this library and must be released with [`cometa_string_free`]. The
//! most recent error message per thread is available via
//! [`cometa_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use cometa_core::config::{EvalConfig, ModelConfig, RunConfig, SegConfig, SplitConfig};
use cometa_core::dataio::{load_csv, load_movielens, synthesize, CsvSchema, InteractionLog, SynthConfig};
use cometa_core::evalharness::{self, build_report, to_json};

/// Result codes of every fallible entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CometaStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidConfig = 3,
    DataError = 4,
    RuntimeError = 5,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(msg).ok();
    });
}

fn fail(status: CometaStatus, msg: impl Into<String>) -> CometaStatus {
    set_error(msg);
    status
}

/// Interaction data behind the C API. Opaque to callers.
pub struct CometaLog {
    inner: InteractionLog,
}

unsafe fn cstr<'a>(ptr: *const c_char) -> Result<&'a str, CometaStatus> {
    if ptr.is_null() {
        set_error("null string argument");
        return Err(CometaStatus::NullArgument);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error("string argument is not valid UTF-8");
        CometaStatus::InvalidUtf8
    })
}

fn guard(body: impl FnOnce() -> CometaStatus) -> CometaStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(CometaStatus::RuntimeError, "internal panic"),
    }
}

fn emit_log(out: *mut *mut CometaLog, log: InteractionLog) -> CometaStatus {
    unsafe {
        *out = Box::into_raw(Box::new(CometaLog { inner: log }));
    }
    CometaStatus::Ok
}

/// Library version as a static string; do not free.
#[no_mangle]
pub extern "C" fn cometa_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message of the most recent error on this thread, or NULL. The caller
/// frees the returned string with `cometa_string_free`.
#[no_mangle]
pub extern "C" fn cometa_last_error() -> *mut c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.clone().into_raw(),
        None => ptr::null_mut(),
    })
}

/// Frees a string allocated by this library. NULL is ignored.
///
/// # Safety
/// `s` must be a pointer previously returned by this library and not yet
/// freed.
#[no_mangle]
pub unsafe extern "C" fn cometa_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Generates a synthetic interaction log. `params_json` may be NULL or
/// empty for the default generator settings.
///
/// # Safety
/// `params_json`, when non-NULL, must point to a NUL-terminated string;
/// `out` must point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cometa_log_synthetic(
    params_json: *const c_char,
    seed: u64,
    out: *mut *mut CometaLog,
) -> CometaStatus {
    guard(|| {
        if out.is_null() {
            return fail(CometaStatus::NullArgument, "null out pointer");
        }
        let params = if params_json.is_null() {
            SynthConfig::default()
        } else {
            let text = match cstr(params_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            if text.trim().is_empty() {
                SynthConfig::default()
            } else {
                match serde_json::from_str(text) {
                    Ok(p) => p,
                    Err(e) => return fail(CometaStatus::InvalidConfig, format!("synthetic params: {e}")),
                }
            }
        };
        match synthesize(&params, seed) {
            Ok(log) => emit_log(out, log),
            Err(e) => fail(CometaStatus::DataError, e.to_string()),
        }
    })
}

/// Loads the three MovieLens-1M files.
///
/// # Safety
/// All path arguments must be NUL-terminated strings; `out` must point to
/// writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cometa_log_movielens(
    ratings_path: *const c_char,
    users_path: *const c_char,
    movies_path: *const c_char,
    out: *mut *mut CometaLog,
) -> CometaStatus {
    guard(|| {
        if out.is_null() {
            return fail(CometaStatus::NullArgument, "null out pointer");
        }
        let (r, u, m) = match (cstr(ratings_path), cstr(users_path), cstr(movies_path)) {
            (Ok(r), Ok(u), Ok(m)) => (r, u, m),
            (Err(s), ..) | (_, Err(s), _) | (.., Err(s)) => return s,
        };
        match load_movielens(Path::new(r), Path::new(u), Path::new(m)) {
            Ok(log) => emit_log(out, log),
            Err(e) => fail(CometaStatus::DataError, e.to_string()),
        }
    })
}

/// Loads a CSV file under a column-role schema document.
///
/// # Safety
/// `path` and `schema_json` must be NUL-terminated strings; `out` must
/// point to writable storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn cometa_log_csv(
    path: *const c_char,
    schema_json: *const c_char,
    out: *mut *mut CometaLog,
) -> CometaStatus {
    guard(|| {
        if out.is_null() {
            return fail(CometaStatus::NullArgument, "null out pointer");
        }
        let (p, s) = match (cstr(path), cstr(schema_json)) {
            (Ok(p), Ok(s)) => (p, s),
            (Err(st), _) | (_, Err(st)) => return st,
        };
        let schema: CsvSchema = match serde_json::from_str(s) {
            Ok(v) => v,
            Err(e) => return fail(CometaStatus::InvalidConfig, format!("csv schema: {e}")),
        };
        match load_csv(Path::new(p), &schema) {
            Ok(log) => emit_log(out, log),
            Err(e) => fail(CometaStatus::DataError, e.to_string()),
        }
    })
}

/// Releases a log handle. NULL is ignored.
///
/// # Safety
/// `log` must be a handle from one of the loaders, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn cometa_log_free(log: *mut CometaLog) {
    if !log.is_null() {
        drop(Box::from_raw(log));
    }
}

/// Basic counts of a log.
///
/// # Safety
/// `log` must be a live handle; out pointers, when non-NULL, must be
/// writable.
#[no_mangle]
pub unsafe extern "C" fn cometa_log_stats(
    log: *const CometaLog,
    users_out: *mut u64,
    items_out: *mut u64,
    records_out: *mut u64,
) -> CometaStatus {
    guard(|| {
        if log.is_null() {
            return fail(CometaStatus::NullArgument, "null log handle");
        }
        let inner = &(*log).inner;
        if !users_out.is_null() {
            *users_out = inner.num_users as u64;
        }
        if !items_out.is_null() {
            *items_out = inner.num_items as u64;
        }
        if !records_out.is_null() {
            *records_out = inner.records.len() as u64;
        }
        CometaStatus::Ok
    })
}

#[derive(serde::Deserialize, Default)]
#[serde(default)]
struct RunDoc {
    split: SplitConfig,
    model: ModelConfig,
    seg: SegConfig,
    eval: EvalConfig,
}

/// Runs the staged cold/warm evaluation protocol on the given log and
/// returns the report as a JSON string (free with `cometa_string_free`).
/// `config_json` holds the split/model/seg/eval sections; NULL or empty
/// uses the defaults.
///
/// # Safety
/// `log` must be a live handle; `config_json`, when non-NULL, must be a
/// NUL-terminated string; `report_json_out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn cometa_run_protocol(
    log: *const CometaLog,
    config_json: *const c_char,
    report_json_out: *mut *mut c_char,
) -> CometaStatus {
    guard(|| {
        if log.is_null() || report_json_out.is_null() {
            return fail(CometaStatus::NullArgument, "null log or out pointer");
        }
        let doc: RunDoc = if config_json.is_null() {
            RunDoc::default()
        } else {
            let text = match cstr(config_json) {
                Ok(t) => t,
                Err(s) => return s,
            };
            if text.trim().is_empty() {
                RunDoc::default()
            } else {
                match serde_json::from_str(text) {
                    Ok(d) => d,
                    Err(e) => return fail(CometaStatus::InvalidConfig, format!("run config: {e}")),
                }
            }
        };
        // reuse the config-document plumbing for spec/protocol derivation
        let run = RunConfig {
            data: cometa_core::config::DataConfig::Synthetic {
                params: SynthConfig::default(),
                seed: 0,
            },
            split: doc.split,
            model: doc.model,
            seg: doc.seg,
            eval: doc.eval,
            out_dir: None,
        };
        let spec = run.split_spec();
        let pcfg = run.protocol_config();
        let outcome = match evalharness::run_protocol(
            &(*log).inner,
            &spec,
            &pcfg,
            &run.eval.kinds,
            &run.eval.seeds,
            run.eval.parallel_seeds,
        ) {
            Ok(o) => o,
            Err(e) => return fail(CometaStatus::RuntimeError, e.to_string()),
        };
        let json = to_json(&build_report(&outcome.reports, &outcome.warnings));
        match CString::new(json) {
            Ok(c) => {
                *report_json_out = c.into_raw();
                CometaStatus::Ok
            }
            Err(_) => fail(CometaStatus::RuntimeError, "report contains NUL"),
        }
    })
}

unsafe fn metric_inputs<'a>(
    scores: *const f64,
    labels: *const f64,
    len: usize,
    out: *mut f64,
) -> Result<(&'a [f64], &'a [f64]), CometaStatus> {
    if scores.is_null() || labels.is_null() || out.is_null() {
        set_error("null metric argument");
        return Err(CometaStatus::NullArgument);
    }
    Ok((
        std::slice::from_raw_parts(scores, len),
        std::slice::from_raw_parts(labels, len),
    ))
}

/// Area under the ROC curve with half-credit ties.
///
/// # Safety
/// `scores` and `labels` must point to `len` readable doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cometa_auc(
    scores: *const f64,
    labels: *const f64,
    len: usize,
    out: *mut f64,
) -> CometaStatus {
    guard(|| {
        let (s, l) = match metric_inputs(scores, labels, len, out) {
            Ok(v) => v,
            Err(st) => return st,
        };
        match evalharness::auc(s, l) {
            Ok(v) => {
                *out = v;
                CometaStatus::Ok
            }
            Err(e) => fail(CometaStatus::DataError, e.to_string()),
        }
    })
}

/// Mean binary cross entropy.
///
/// # Safety
/// `scores` and `labels` must point to `len` readable doubles; `out` must
/// be writable.
#[no_mangle]
pub unsafe extern "C" fn cometa_logloss(
    scores: *const f64,
    labels: *const f64,
    len: usize,
    out: *mut f64,
) -> CometaStatus {
    guard(|| {
        let (s, l) = match metric_inputs(scores, labels, len, out) {
            Ok(v) => v,
            Err(st) => return st,
        };
        match evalharness::logloss(s, l) {
            Ok(v) => {
                *out = v;
                CometaStatus::Ok
            }
            Err(e) => fail(CometaStatus::DataError, e.to_string()),
        }
    })
}
