use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;

use gridsel_ffi::*;

const TINY: &str = r#"
name = "ffi"
seed = 2
bucket_seconds = 600.0
timeout = 300.0

[topology]
kind = "combined"
head_cores = 2

[costs]
t_gsi = 0.7
t_srm = 0.49
t_row = 1e-4
t_disk = 0.005
t_fsync = 0.05

[buffer]
size = 33554432
curve = [[33554432, 0.97], [4294967296, 0.999]]

[monitors]
request_monitor = { enabled = false, period = 60.0 }
namespace_monitor = { enabled = false, period = 300.0 }

[catalog]
n_files = 20
dataset_files = 4
n_groups = 2
replicas_per_file = 1

[history]
get_rows = 10
put_rows = 10

[pools]
count = 2
link_capacity = 125000000.0
filesystems = 1
fs_capacity = 4000000000000

[workload]
n_jobs = 2
slots = 2
admission_jitter = 1.0
duration_cap = 86400.0
on_failure = "skip"

[workload.job]
dn = "/DC=org/CN=ffi"
n_files = 2
file_size = 1000000
events_per_file = 10
t_cpu_per_event = 0.1
pin_lifetime = 3600.0
"#;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gs_last_error()) }.to_str().unwrap().to_owned()
}

fn parse(text: &str) -> (GsStatus, *mut GsScenario) {
    let c = CString::new(text).unwrap();
    let mut s = ptr::null_mut();
    let st = unsafe { gs_scenario_parse(c.as_ptr(), &mut s) };
    (st, s)
}

#[test]
fn parse_run_and_read_back() {
    let (st, s) = parse(TINY);
    assert_eq!(st, GsStatus::Ok, "{}", last_error());
    assert!(last_error().is_empty());

    let slots = CString::new("slots").unwrap();
    let mut v = 0.0;
    unsafe {
        assert_eq!(gs_scenario_set_param(s, slots.as_ptr(), 1.0), GsStatus::Ok);
        assert_eq!(gs_scenario_get_param(s, slots.as_ptr(), &mut v), GsStatus::Ok);
    }
    assert_eq!(v, 1.0);

    let mut r = ptr::null_mut();
    assert_eq!(unsafe { gs_run(s, 2, &mut r) }, GsStatus::Ok, "{}", last_error());
    let mut json = ptr::null_mut();
    assert_eq!(unsafe { gs_report_json(r, &mut json) }, GsStatus::Ok);
    let doc = unsafe { CStr::from_ptr(json) }.to_str().unwrap();
    assert!(doc.contains("\"jobs_finished\": 2"), "{doc}");

    let metric = CString::new("total_successes").unwrap();
    let mut ok = 0.0;
    assert_eq!(unsafe { gs_report_metric(r, metric.as_ptr(), &mut ok) }, GsStatus::Ok);
    assert_eq!(ok, 4.0);
    let bogus = CString::new("bogus").unwrap();
    assert_eq!(unsafe { gs_report_metric(r, bogus.as_ptr(), &mut ok) }, GsStatus::UnknownName);
    assert!(last_error().contains("bogus"));

    unsafe {
        gs_string_free(json);
        gs_report_free(r);
        gs_scenario_free(s);
    }
}

#[test]
fn same_seed_same_json_through_the_abi() {
    let (_, s) = parse(TINY);
    let json = |seed| unsafe {
        let mut r = ptr::null_mut();
        assert_eq!(gs_run(s, seed, &mut r), GsStatus::Ok);
        let mut j = ptr::null_mut();
        gs_report_json(r, &mut j);
        let out = CStr::from_ptr(j).to_str().unwrap().to_owned();
        gs_string_free(j);
        gs_report_free(r);
        out
    };
    assert_eq!(json(7), json(7));
    unsafe { gs_scenario_free(s) };
}

#[test]
fn errors_map_to_codes() {
    let (st, s) = parse("name = 1");
    assert_eq!(st, GsStatus::InvalidInput);
    assert!(s.is_null());
    assert!(!last_error().is_empty());

    let mut out = ptr::null_mut();
    assert_eq!(unsafe { gs_scenario_parse(ptr::null(), &mut out) }, GsStatus::NullArgument);
    let (_, s) = parse(TINY);
    assert_eq!(unsafe { gs_scenario_parse(ptr::null(), ptr::null_mut()) }, GsStatus::NullArgument);

    let bad = [0xffu8, 0];
    assert_eq!(
        unsafe { gs_scenario_parse(bad.as_ptr().cast(), &mut out) },
        GsStatus::InvalidUtf8
    );

    let missing = CString::new("/nonexistent/scenario.cfg").unwrap();
    assert_eq!(unsafe { gs_scenario_load(missing.as_ptr(), &mut out) }, GsStatus::Io);

    let name = CString::new("no_such_knob").unwrap();
    assert_eq!(unsafe { gs_scenario_set_param(s, name.as_ptr(), 1.0) }, GsStatus::UnknownName);

    let mut r = ptr::null_mut();
    assert_eq!(unsafe { gs_run(ptr::null(), 1, &mut r) }, GsStatus::NullArgument);
    assert!(r.is_null());

    unsafe {
        gs_scenario_free(s);
        gs_scenario_free(ptr::null_mut());
        gs_report_free(ptr::null_mut());
        gs_store_free(ptr::null_mut());
        gs_string_free(ptr::null_mut());
    }
}

#[test]
fn load_preset_file() {
    let p = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets/hc38.cfg");
    let c = CString::new(p.to_str().unwrap()).unwrap();
    let mut s = ptr::null_mut();
    assert_eq!(unsafe { gs_scenario_load(c.as_ptr(), &mut s) }, GsStatus::Ok);
    let name = CString::new("slots").unwrap();
    let mut v = 0.0;
    assert_eq!(unsafe { gs_scenario_get_param(s, name.as_ptr(), &mut v) }, GsStatus::Ok);
    assert_eq!(v, 105.0);
    unsafe { gs_scenario_free(s) };
}

#[test]
fn store_snapshot_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.snap");
    let mut store = gridsel::tablestore::Store::new();
    let t = store
        .create_table(
            gridsel::tablestore::TableSchema::new("t")
                .column("a", gridsel::tablestore::ColumnKind::Integer),
        )
        .unwrap();
    for i in 0..5i64 {
        store
            .insert(t, gridsel::tablestore::OwnerId(1), vec![i.into()])
            .unwrap();
    }
    gridsel::tablestore::snapshot::save(&store, &path).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { gs_store_load(c.as_ptr(), &mut h) }, GsStatus::Ok, "{}", last_error());
    let table = CString::new("t").unwrap();
    let mut n = 0usize;
    assert_eq!(unsafe { gs_store_row_count(h, table.as_ptr(), &mut n) }, GsStatus::Ok);
    assert_eq!(n, 5);
    let other = CString::new("u").unwrap();
    assert_eq!(unsafe { gs_store_row_count(h, other.as_ptr(), &mut n) }, GsStatus::UnknownName);
    unsafe { gs_store_free(h) };
}

#[test]
fn header_compiles_as_c() {
    let header = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("include/gridsel.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in ["gs_scenario_parse", "gs_run", "gs_report_json", "gs_store_load", "GS_STATUS_OK"] {
        assert!(text.contains(f), "{f} missing from header");
    }
    let Ok(o) = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-x", "c"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; syntax check skipped");
        return;
    };
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
}

