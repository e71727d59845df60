//! C bindings over the crosstune library.
//!
//! Conventions:
//! * Handles (`CtTask`) are opaque; create with the `ct_task_*`
//!   constructors and release with `ct_task_free` exactly once. Read-only
//!   calls on one handle are safe from multiple threads.
//! * Returned strings are NUL-terminated, owned by the caller, and must be
//!   released with `ct_string_free`.
//! * Fallible calls return `CtStatus`; on any non-Ok status,
//!   `ct_last_error` holds a message valid until the calling thread's next
//!   crosstune call.

use std::cell::RefCell;
use std::collections::BTreeSet;
use std::ffi::{c_char, CStr, CString};
use std::path::{Path, PathBuf};
use std::ptr;

use crosstune::harness::{
    load_matrix_config, persist_runs, report, run_matrix, HarnessError, ReportFormat,
};
use crosstune::labelmap::identity_mapping;
use crosstune::metrics::{macro_f1, micro_f1, LabelSet, MetricsError};
use crosstune::prompt::{assemble, render};
use crosstune::task::synth::{make_synthetic_pair, SynthPairConfig};
use crosstune::task::{load_task_spec, Example, TaskSpec};

/// Result of a fallible call. Anything but `Ok` leaves a message in
/// `ct_last_error`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    /// A required pointer argument was NULL.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Task, label, or corpus problem.
    Task = 3,
    /// Configuration problem.
    Config = 4,
    /// Model or training failure.
    Runtime = 5,
    /// File IO failure.
    Io = 6,
}

/// A loaded classification task. Opaque.
pub struct CtTask {
    spec: TaskSpec,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized: Vec<u8> = message.bytes().filter(|&b| b != 0).collect();
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn clear_error() {
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::default();
    });
}

fn status_of(err: &HarnessError) -> CtStatus {
    match err {
        HarnessError::Config(_) => CtStatus::Config,
        HarnessError::Task(_)
        | HarnessError::Mapping(_)
        | HarnessError::Retrieval(_)
        | HarnessError::Prompt(_)
        | HarnessError::Metrics(_) => CtStatus::Task,
        HarnessError::Model(_) | HarnessError::Backend(_) | HarnessError::Invariant(_) => {
            CtStatus::Runtime
        }
        HarnessError::RunLog { .. } => CtStatus::Io,
    }
}

/// # Safety
/// `s` must be NULL or a NUL-terminated string.
unsafe fn utf8_arg<'a>(s: *const c_char, name: &str) -> Result<&'a str, CtStatus> {
    if s.is_null() {
        set_error(&format!("{name} is NULL"));
        return Err(CtStatus::NullArgument);
    }
    match unsafe { CStr::from_ptr(s) }.to_str() {
        Ok(v) => Ok(v),
        Err(_) => {
            set_error(&format!("{name} is not valid UTF-8"));
            Err(CtStatus::InvalidUtf8)
        }
    }
}

fn owned_c_string(s: String) -> *mut c_char {
    let sanitized: Vec<u8> = s.into_bytes().into_iter().filter(|&b| b != 0).collect();
    CString::new(sanitized)
        .map(CString::into_raw)
        .unwrap_or(ptr::null_mut())
}

/// Library version as a static string. Never freed.
#[no_mangle]
pub extern "C" fn ct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the calling thread's most recent failure; empty string when
/// the last call succeeded. Valid until this thread's next crosstune call.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned by this library. NULL is a no-op.
///
/// # Safety
/// `s` must have come from a crosstune call and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ct_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(unsafe { CString::from_raw(s) });
    }
}

/// Loads and validates a task spec from a JSON file. NULL on failure.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ct_task_load(path: *const c_char) -> *mut CtTask {
    clear_error();
    let path = match unsafe { utf8_arg(path, "path") } {
        Ok(p) => p,
        Err(_) => return ptr::null_mut(),
    };
    match load_task_spec(Path::new(path)) {
        Ok(spec) => Box::into_raw(Box::new(CtTask { spec })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Parses and validates a task spec from a JSON string. NULL on failure.
///
/// # Safety
/// `json` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ct_task_from_json(json: *const c_char) -> *mut CtTask {
    clear_error();
    let json = match unsafe { utf8_arg(json, "json") } {
        Ok(j) => j,
        Err(_) => return ptr::null_mut(),
    };
    match crosstune::task::task_spec_from_json(json) {
        Ok(spec) => Box::into_raw(Box::new(CtTask { spec })),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// Releases a task handle. NULL is a no-op.
///
/// # Safety
/// `task` must have come from a `ct_task_*` constructor and not have been
/// freed.
#[no_mangle]
pub unsafe extern "C" fn ct_task_free(task: *mut CtTask) {
    if !task.is_null() {
        drop(unsafe { Box::from_raw(task) });
    }
}

/// Number of classes in the task's label space; 0 if `task` is NULL.
///
/// # Safety
/// `task` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ct_task_num_classes(task: *const CtTask) -> usize {
    match unsafe { task.as_ref() } {
        Some(t) => t.spec.label_space.len(),
        None => 0,
    }
}

/// Whether the task allows multiple labels per example; false if NULL.
///
/// # Safety
/// `task` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ct_task_multi_label(task: *const CtTask) -> bool {
    match unsafe { task.as_ref() } {
        Some(t) => t.spec.multi_label,
        None => false,
    }
}

/// Class name at `index` in label-space order, as a caller-owned string.
/// NULL when `task` is NULL or `index` is out of range.
///
/// # Safety
/// `task` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn ct_task_class_name(task: *const CtTask, index: usize) -> *mut c_char {
    clear_error();
    let Some(t) = (unsafe { task.as_ref() }) else {
        set_error("task is NULL");
        return ptr::null_mut();
    };
    match t.spec.label_space.get(index) {
        Some(class) => owned_c_string(class.name.clone()),
        None => {
            set_error(&format!(
                "class index {index} out of range for {} classes",
                t.spec.label_space.len()
            ));
            ptr::null_mut()
        }
    }
}

/// Renders the zero-shot prompt for a query transcript under the task's
/// own class definitions. Caller owns the returned string; NULL on failure.
///
/// # Safety
/// `task` must be a live handle; `query` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ct_render_prompt(
    task: *const CtTask,
    query: *const c_char,
) -> *mut c_char {
    clear_error();
    let Some(t) = (unsafe { task.as_ref() }) else {
        set_error("task is NULL");
        return ptr::null_mut();
    };
    let query = match unsafe { utf8_arg(query, "query") } {
        Ok(q) => q,
        Err(_) => return ptr::null_mut(),
    };
    let mapping = identity_mapping(&t.spec);
    let example = Example::new("query", query, &[]);
    match assemble(&t.spec, &mapping, &[], &example, false) {
        Ok(bundle) => owned_c_string(render(&bundle)),
        Err(e) => {
            set_error(&e.to_string());
            ptr::null_mut()
        }
    }
}

/// # Safety
/// Caller contract of [`ct_score_macro_f1`].
unsafe fn parse_label_sets(
    task: &TaskSpec,
    rows: *const *const c_char,
    len: usize,
    name: &str,
) -> Result<Vec<LabelSet>, CtStatus> {
    if rows.is_null() {
        set_error(&format!("{name} is NULL"));
        return Err(CtStatus::NullArgument);
    }
    let _ = task;
    let mut sets = Vec::with_capacity(len);
    for i in 0..len {
        let row = unsafe { *rows.add(i) };
        let text = unsafe { utf8_arg(row, &format!("{name}[{i}]")) }?;
        let labels: BTreeSet<String> = text
            .split(", ")
            .filter(|s| !s.is_empty())
            .map(|s| s.to_string())
            .collect();
        sets.push(LabelSet::from(&labels));
    }
    Ok(sets)
}

fn finish_score(result: Result<f64, MetricsError>, out: *mut f64) -> CtStatus {
    match result {
        Ok(v) => {
            unsafe { *out = v };
            CtStatus::Ok
        }
        Err(e) => {
            set_error(&e.to_string());
            CtStatus::Task
        }
    }
}

/// Macro-averaged F1 of `preds` against `golds` over the task's label
/// space. Each of the `len` rows is a ", "-joined set of class names
/// (empty string for the empty set). Unknown class names are an error.
///
/// # Safety
/// `task` must be a live handle; `golds` and `preds` must point to `len`
/// NUL-terminated strings each; `out` must be a valid f64 pointer.
#[no_mangle]
pub unsafe extern "C" fn ct_score_macro_f1(
    task: *const CtTask,
    golds: *const *const c_char,
    preds: *const *const c_char,
    len: usize,
    out: *mut f64,
) -> CtStatus {
    clear_error();
    let Some(t) = (unsafe { task.as_ref() }) else {
        set_error("task is NULL");
        return CtStatus::NullArgument;
    };
    if out.is_null() {
        set_error("out is NULL");
        return CtStatus::NullArgument;
    }
    let golds = match unsafe { parse_label_sets(&t.spec, golds, len, "golds") } {
        Ok(g) => g,
        Err(status) => return status,
    };
    let preds = match unsafe { parse_label_sets(&t.spec, preds, len, "preds") } {
        Ok(p) => p,
        Err(status) => return status,
    };
    finish_score(macro_f1(&golds, &preds, &t.spec).map(|r| r.aggregate), out)
}

/// Micro-averaged F1; same contract as `ct_score_macro_f1`.
///
/// # Safety
/// Same contract as `ct_score_macro_f1`.
#[no_mangle]
pub unsafe extern "C" fn ct_score_micro_f1(
    task: *const CtTask,
    golds: *const *const c_char,
    preds: *const *const c_char,
    len: usize,
    out: *mut f64,
) -> CtStatus {
    clear_error();
    let Some(t) = (unsafe { task.as_ref() }) else {
        set_error("task is NULL");
        return CtStatus::NullArgument;
    };
    if out.is_null() {
        set_error("out is NULL");
        return CtStatus::NullArgument;
    }
    let golds = match unsafe { parse_label_sets(&t.spec, golds, len, "golds") } {
        Ok(g) => g,
        Err(status) => return status,
    };
    let preds = match unsafe { parse_label_sets(&t.spec, preds, len, "preds") } {
        Ok(p) => p,
        Err(status) => return status,
    };
    finish_score(micro_f1(&golds, &preds, &t.spec).map(|r| r.aggregate), out)
}

/// Generates the synthetic matched/mismatched task pair (task_a, task_b)
/// into `out_dir`: a task spec plus train/validation/eval corpora each.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ct_synth_pair(
    seed: u64,
    classes: usize,
    out_dir: *const c_char,
) -> CtStatus {
    clear_error();
    let out_dir = match unsafe { utf8_arg(out_dir, "out_dir") } {
        Ok(d) => PathBuf::from(d),
        Err(status) => return status,
    };
    let cfg = SynthPairConfig {
        seed,
        n_classes: classes,
        ..SynthPairConfig::default()
    };
    let pair = match make_synthetic_pair(&cfg) {
        Ok(p) => p,
        Err(e) => {
            set_error(&e.to_string());
            return CtStatus::Task;
        }
    };
    if let Err(e) = std::fs::create_dir_all(&out_dir) {
        set_error(&format!("cannot create {}: {e}", out_dir.display()));
        return CtStatus::Io;
    }
    for files in [&pair.a, &pair.b] {
        if let Err(e) = files.write_to(&out_dir) {
            set_error(&e.to_string());
            return CtStatus::Io;
        }
    }
    CtStatus::Ok
}

/// Runs a full experiment matrix from a config file. On success,
/// `out_report` receives the caller-owned report text (markdown when
/// `markdown` is true, CSV otherwise). When `runs_path` is non-NULL, run
/// records are appended there as JSONL.
///
/// # Safety
/// `config_path` must be a NUL-terminated string; `runs_path` NULL or the
/// same; `out_report` a valid pointer slot.
#[no_mangle]
pub unsafe extern "C" fn ct_run_matrix(
    config_path: *const c_char,
    runs_path: *const c_char,
    markdown: bool,
    out_report: *mut *mut c_char,
) -> CtStatus {
    clear_error();
    if out_report.is_null() {
        set_error("out_report is NULL");
        return CtStatus::NullArgument;
    }
    let config_path = match unsafe { utf8_arg(config_path, "config_path") } {
        Ok(p) => p,
        Err(status) => return status,
    };
    let runs_path = if runs_path.is_null() {
        None
    } else {
        match unsafe { utf8_arg(runs_path, "runs_path") } {
            Ok(p) => Some(PathBuf::from(p)),
            Err(status) => return status,
        }
    };

    let outcome = match load_matrix_config(Path::new(config_path)).and_then(|cfg| run_matrix(&cfg))
    {
        Ok(o) => o,
        Err(e) => {
            set_error(&e.to_string());
            return status_of(&e);
        }
    };
    if let Some(path) = runs_path {
        if let Err(e) = persist_runs(&path, &outcome.records) {
            set_error(&e.to_string());
            return status_of(&e);
        }
    }
    let format = if markdown {
        ReportFormat::Markdown
    } else {
        ReportFormat::Csv
    };
    unsafe { *out_report = owned_c_string(report(&outcome.table, format)) };
    CtStatus::Ok
}
