//! C interface. Every call returns a [`GsStatus`]; on failure the message is
//! available from [`gs_last_error`] on the same thread. Handles are opaque
//! and owned by the caller, who releases them with the matching `_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use gridsel::hammer::{run_test, RunReport};
use gridsel::scenario::{ConfigError, ScenarioConfig};
use gridsel::tablestore::{snapshot, Store};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GsStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    /// Malformed or inconsistent scenario / snapshot.
    InvalidInput = 3,
    Io = 4,
    /// The simulation itself failed.
    Runtime = 5,
    UnknownName = 6,
    Panic = 7,
}

/// A parsed scenario.
pub struct GsScenario(ScenarioConfig);

/// The outcome of one run.
pub struct GsReport(RunReport);

/// A table store loaded from a snapshot.
pub struct GsStore(Store);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).expect("no interior nul"));
}

fn guard(f: impl FnOnce() -> Result<(), (GsStatus, String)>) -> GsStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            GsStatus::Ok
        }
        Ok(Err((code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic");
            GsStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, (GsStatus, String)> {
    if p.is_null() {
        return Err((GsStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (GsStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

fn config_error(e: ConfigError) -> (GsStatus, String) {
    let code = match e {
        ConfigError::Io { .. } => GsStatus::Io,
        _ => GsStatus::InvalidInput,
    };
    (code, e.to_string())
}

macro_rules! non_null {
    ($p:expr, $what:literal) => {
        if $p.is_null() {
            return Err((GsStatus::NullArgument, concat!($what, " is null").to_owned()));
        }
    };
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next call on the thread.
#[no_mangle]
pub extern "C" fn gs_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Releases a string returned by this library.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn gs_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses scenario TOML text.
///
/// # Safety
/// `toml` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_parse(toml: *const c_char, out: *mut *mut GsScenario) -> GsStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        let cfg = ScenarioConfig::from_toml(text(toml, "toml")?).map_err(config_error)?;
        *out = Box::into_raw(Box::new(GsScenario(cfg)));
        Ok(())
    })
}

/// Loads a scenario file.
///
/// # Safety
/// `path` must be a nul-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_load(path: *const c_char, out: *mut *mut GsScenario) -> GsStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        let cfg = ScenarioConfig::load(Path::new(text(path, "path")?)).map_err(config_error)?;
        *out = Box::into_raw(Box::new(GsScenario(cfg)));
        Ok(())
    })
}

/// Sets a tunable (`slots`, `timeout`, `t_disk`, ...).
///
/// # Safety
/// `s` must be a live scenario handle and `name` a nul-terminated string.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_set_param(s: *mut GsScenario, name: *const c_char, value: f64) -> GsStatus {
    guard(|| {
        non_null!(s, "scenario");
        let name = text(name, "name")?;
        if (*s).0.set_param(name, value) {
            Ok(())
        } else {
            Err((GsStatus::UnknownName, format!("unknown parameter `{name}`")))
        }
    })
}

/// # Safety
/// `s` must be a live scenario handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_get_param(s: *const GsScenario, name: *const c_char, out: *mut f64) -> GsStatus {
    guard(|| {
        non_null!(s, "scenario");
        non_null!(out, "out");
        let name = text(name, "name")?;
        *out = (*s)
            .0
            .param(name)
            .ok_or_else(|| (GsStatus::UnknownName, format!("unknown parameter `{name}`")))?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a scenario handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn gs_scenario_free(s: *mut GsScenario) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Runs the scenario with `seed`.
///
/// # Safety
/// `s` must be a live scenario handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_run(s: *const GsScenario, seed: u64, out: *mut *mut GsReport) -> GsStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        non_null!(s, "scenario");
        let r = run_test(&(*s).0, seed).map_err(|e| (GsStatus::Runtime, e.to_string()))?;
        *out = Box::into_raw(Box::new(GsReport(r)));
        Ok(())
    })
}

/// The report as JSON; free with [`gs_string_free`].
///
/// # Safety
/// `r` must be a live report handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_report_json(r: *const GsReport, out: *mut *mut c_char) -> GsStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        non_null!(r, "report");
        let json = CString::new((*r).0.to_json()).map_err(|e| (GsStatus::Runtime, e.to_string()))?;
        *out = json.into_raw();
        Ok(())
    })
}

/// A summary metric such as `mean_event_rate` or `peak:db-disk`.
///
/// # Safety
/// `r` must be a live report handle, `name` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_report_metric(r: *const GsReport, name: *const c_char, out: *mut f64) -> GsStatus {
    guard(|| {
        non_null!(r, "report");
        non_null!(out, "out");
        let name = text(name, "name")?;
        *out = (*r)
            .0
            .summary
            .metric(name)
            .ok_or_else(|| (GsStatus::UnknownName, format!("unknown metric `{name}`")))?;
        Ok(())
    })
}

/// # Safety
/// `r` must be null or a report handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn gs_report_free(r: *mut GsReport) {
    if !r.is_null() {
        drop(Box::from_raw(r));
    }
}

/// Loads a table-store snapshot.
///
/// # Safety
/// `path` must be nul-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn gs_store_load(path: *const c_char, out: *mut *mut GsStore) -> GsStatus {
    guard(|| {
        non_null!(out, "out");
        *out = ptr::null_mut();
        let p = text(path, "path")?;
        let store = snapshot::load(Path::new(p)).map_err(|e| (GsStatus::InvalidInput, e.to_string()))?;
        *out = Box::into_raw(Box::new(GsStore(store)));
        Ok(())
    })
}

/// Number of rows in `table`.
///
/// # Safety
/// `s` must be a live store handle, `table` nul-terminated, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn gs_store_row_count(s: *const GsStore, table: *const c_char, out: *mut usize) -> GsStatus {
    guard(|| {
        non_null!(s, "store");
        non_null!(out, "out");
        let name = text(table, "table")?;
        let store = &(*s).0;
        let id = store
            .table_id(name)
            .map_err(|e| (GsStatus::UnknownName, e.to_string()))?;
        *out = store.len(id).map_err(|e| (GsStatus::Runtime, e.to_string()))?;
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a store handle that has not been freed.
#[no_mangle]
pub unsafe extern "C" fn gs_store_free(s: *mut GsStore) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn guard_turns_panics_into_codes() {
        let prev = std::panic::take_hook();
        std::panic::set_hook(Box::new(|_| {}));
        let st = guard(|| panic!("boom"));
        std::panic::set_hook(prev);
        assert_eq!(st, GsStatus::Panic);
        let msg = unsafe { CStr::from_ptr(gs_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "internal panic");
        assert_eq!(guard(|| Ok(())), GsStatus::Ok);
        assert!(unsafe { CStr::from_ptr(gs_last_error()) }.to_bytes().is_empty());
    }

    #[test]
    fn interior_nul_in_message_is_kept_printable() {
        set_error("a\0b");
        let msg = unsafe { CStr::from_ptr(gs_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
