use std::path::PathBuf;

use gridsel::hammer::run_test;
use gridsel::scenario::ScenarioConfig;

fn hc38() -> ScenarioConfig {
    ScenarioConfig::load(&PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../presets/hc38.cfg"))
        .unwrap()
}

/// 300 simultaneous gets against the two-core combined head keep its CPU
/// busy.
#[test]
fn three_hundred_concurrent_gets_saturate_a_two_core_head() {
    let mut cfg = hc38();
    cfg.bucket_seconds = 60.0;
    cfg.workload.n_jobs = 300;
    cfg.workload.slots = 300;
    cfg.workload.admission_jitter = 0.0;
    cfg.workload.job.n_files = 1;
    let r = run_test(&cfg, 1).unwrap();
    let s = &r.summary;
    assert_eq!(r.max_running, 300);
    assert!(s.metric("peak:head-cpu").unwrap() >= 0.9, "{:?}", s.station_peak);
}

/// Halving the head's cores roughly doubles how long the same burst takes.
#[test]
fn fewer_head_cores_stretch_the_burst() {
    let mut cfg = hc38();
    cfg.workload.n_jobs = 100;
    cfg.workload.slots = 100;
    cfg.workload.job.n_files = 1;
    let two = run_test(&cfg, 1).unwrap().makespan;
    cfg.topology = gridsel::scenario::Topology::Combined { head_cores: 1 };
    let one = run_test(&cfg, 1).unwrap().makespan;
    assert!(one > 1.5 * two, "{one} vs {two}");
}
