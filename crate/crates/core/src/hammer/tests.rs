use super::*;
use crate::scenario::tests::SAMPLE;

fn sample() -> ScenarioConfig {
    ScenarioConfig::from_toml(SAMPLE).unwrap()
}

fn check_invariants(r: &RunReport) {
    let s = &r.summary;
    assert_eq!(s.total_successes, r.done_filereqs);
    assert_eq!(s.total_failures, r.failed_filereqs);
    let events: u64 = r.jobs.iter().map(|j| j.events_done).sum();
    assert_eq!(events, r.done_get_events);
    assert!(r.max_running <= r.scenario.workload.slots);
    for j in r.jobs.iter().filter(|j| j.files_ok > 0) {
        assert!(j.efficiency > 0.0 && j.efficiency <= 1.0, "{j:?}");
        assert!(j.event_rate >= 0.0);
    }
}

#[test]
fn single_job_single_file() {
    let mut cfg = sample();
    cfg.workload.n_jobs = 1;
    cfg.workload.admission_jitter = 0.0;
    cfg.workload.job.n_files = 1;
    cfg.monitors.request_monitor.enabled = false;
    let r = run_test(&cfg, 1).unwrap();
    let j = &r.jobs[0];
    let cpu = 10.0 * 0.1;
    assert!((j.cputime - cpu).abs() < 1e-12);
    assert!(j.walltime > cpu);
    assert!(j.efficiency < 1.0);
    assert_eq!(j.event_rate, 10.0 / j.walltime);
    // one get, one poll, one release: three authenticated calls
    let svc = cfg.costs.t_gsi + cfg.costs.t_srm;
    let transfer = cfg.workload.job.file_size as f64 / cfg.pools.link_capacity;
    assert!(j.walltime >= cpu + 3.0 * svc + transfer);
    check_invariants(&r);
}

#[test]
fn sample_run_keeps_invariants_and_is_deterministic() {
    let cfg = sample();
    let a = run_test(&cfg, 3).unwrap();
    check_invariants(&a);
    assert_eq!(a.summary.jobs_finished, 3);
    assert_eq!(a.summary.total_successes, 6);
    let b = run_test(&cfg, 3).unwrap();
    assert_eq!(a.to_json(), b.to_json());
    let c = run_test(&cfg, 4).unwrap();
    assert_ne!(a.to_json(), c.to_json());
}

#[test]
fn output_puts_are_counted() {
    let mut cfg = sample();
    cfg.workload.job.output_size = 1000;
    let r = run_test(&cfg, 1).unwrap();
    check_invariants(&r);
    assert_eq!(r.summary.total_successes, 6 + 3);
}

#[test]
fn timeouts_fail_transfers() {
    let mut cfg = sample();
    cfg.timeout = 1e-3;
    let r = run_test(&cfg, 1).unwrap();
    check_invariants(&r);
    assert_eq!(r.summary.total_successes, 0);
    assert_eq!(r.summary.total_failures, 6);
    assert!(r.jobs.iter().all(|j| j.events_done == 0));

    cfg.workload.on_failure = OnFailure::Abort;
    let r = run_test(&cfg, 1).unwrap();
    assert_eq!(r.summary.total_failures, 3);
}

#[test]
fn slots_bound_concurrency() {
    let mut cfg = sample();
    cfg.workload.n_jobs = 7;
    cfg.workload.slots = 2;
    let r = run_test(&cfg, 1).unwrap();
    assert_eq!(r.max_running, 2);
    // the jobs' lifetimes never overlap more than the slot count
    let mut edges: Vec<(f64, i32)> = r
        .jobs
        .iter()
        .flat_map(|j| [(j.start, 1), (j.end, -1)])
        .collect();
    edges.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut live = 0;
    for (_, d) in edges {
        live += d;
        assert!(live <= 2);
    }
    check_invariants(&r);
}

#[test]
fn csv_shapes() {
    let r = run_test(&sample(), 1).unwrap();
    let t = r.transfers_csv();
    assert!(t.starts_with("bucket_start,dn,outcome,count\n"));
    assert!(t.contains(",/DC=org/CN=tester,success,"));
    let u = r.utilisation_csv();
    assert!(u.starts_with("bucket_start,station,busy_fraction\n"));
    assert!(u.contains(",db-disk,"));
    assert!(u.contains(",link:pool01,"));
}

#[test]
fn single_report_ratios_are_one() {
    let r = run_test(&sample(), 1).unwrap();
    let c = summarize(&[&r]);
    assert!(!c.ratios.is_empty());
    assert!(c.ratios.iter().all(|x| x.value == 1.0));
}
