//! HammerCloud-style load test: analysis jobs share a cluster's slots and
//! each reads its files one after another through the broker and pools.

mod report;

pub use report::{
    bucketize, summarize, Comparison, RatioRow, RunSummary, TransferBucket, TransferRecord,
    REPORT_VERSION,
};

use std::collections::{BTreeMap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{
    Broker, BrokerCounters, BrokerError, BrokerEvent, BrokerStations, CallDone, Outcome, Reply,
    Status, Token, GET_FILEREQ_TABLE, PUT_FILEREQ_TABLE,
};
use crate::dbmodel::MonitorAgent;
use crate::desengine::{Engine, EngineError, StationSpec, UtilisationSeries};
use crate::namespace::{load_entries, seed_catalog, Catalog, NamespaceError, SeedSpec};
use crate::pools::{PoolError, Pools, TransferId, TransferSignal};
use crate::scenario::{ConfigError, OnFailure, ScenarioConfig, Topology};
use crate::tablestore::{IndexSpec, Predicate, Projection, Store, StoreError};

#[derive(Debug, Error)]
pub enum HammerError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
    #[error(transparent)]
    Namespace(#[from] NamespaceError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

/// Station names, by role, in a run's utilisation series.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StationRoles {
    pub svc_cpu: String,
    pub db_cpu: String,
    pub db_disk: String,
    pub links: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobResult {
    pub job: u32,
    pub dn: String,
    pub start: f64,
    pub end: f64,
    pub walltime: f64,
    pub cputime: f64,
    pub events_done: u64,
    /// Events per second of walltime.
    pub event_rate: f64,
    pub efficiency: f64,
    pub files_ok: u32,
    pub files_failed: u32,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u32,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub makespan: f64,
    pub max_running: u32,
    pub jobs: Vec<JobResult>,
    pub transfers: Vec<TransferBucket>,
    pub stations: StationRoles,
    pub utilisation: Vec<UtilisationSeries>,
    pub broker: BrokerCounters,
    pub hit_rate: f64,
    /// Terminal filereq rows created during the run.
    pub done_filereqs: u64,
    pub failed_filereqs: u64,
    /// Events promised by DONE get filereqs of the run.
    pub done_get_events: u64,
    pub summary: RunSummary,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn transfers_csv(&self) -> String {
        let mut s = String::from("bucket_start,dn,outcome,count\n");
        for b in &self.transfers {
            s.push_str(&format!("{},{},{},{}\n", b.bucket_start, b.dn, b.outcome, b.count));
        }
        s
    }

    pub fn utilisation_csv(&self) -> String {
        let mut s = String::from("bucket_start,station,busy_fraction\n");
        for u in &self.utilisation {
            for (t, f) in &u.buckets {
                s.push_str(&format!("{t},{},{f}\n", u.station));
            }
        }
        s
    }

    pub fn station_peak(&self, name: &str) -> Option<f64> {
        self.utilisation
            .iter()
            .find(|u| u.station == name)
            .map(UtilisationSeries::peak)
    }
}

const MONITOR_OWNER: u64 = u64::MAX - 2;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Ev {
    Broker(BrokerEvent),
    Start(u32),
    Transfer(TransferId, TransferSignal),
    Processed(u32),
    Monitor(usize),
}

impl From<BrokerEvent> for Ev {
    fn from(e: BrokerEvent) -> Self {
        Ev::Broker(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Get,
    Poll,
    Mark,
    Transfer,
    Process,
    Release(Outcome),
}

struct Job {
    start: f64,
    cpu: f64,
    events: u64,
    file: u32,
    ok: u32,
    failed: u32,
    token: Option<Token>,
    phase: Phase,
    /// Working on the output put rather than an input file.
    output: bool,
    end: Option<f64>,
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    engine: Engine<Ev>,
    broker: Broker,
    pools: Pools,
    monitors: Vec<MonitorAgent>,
    dataset: Vec<String>,
    jobs: BTreeMap<u32, Job>,
    transfers: BTreeMap<TransferId, u32>,
    log: Vec<TransferRecord>,
    rng: ChaCha8Rng,
    queued: VecDeque<u32>,
    running: u32,
    max_running: u32,
    finished: u32,
}

fn dataset_pfn(i: u64) -> String {
    format!("/dpm/site/home/atlas/aod/file{i:07}.root")
}

/// Runs one scenario to completion (or its duration cap).
pub fn run_test(cfg: &ScenarioConfig, seed: u64) -> Result<RunReport, HammerError> {
    Ok(run_traced(cfg, seed, false)?.0)
}

/// As [`run_test`], optionally recording the station trace as text.
pub fn run_traced(
    cfg: &ScenarioConfig,
    seed: u64,
    trace: bool,
) -> Result<(RunReport, Option<String>), HammerError> {
    cfg.validate()?;
    let mut world = World::build(cfg, seed)?;
    if trace {
        world.engine.enable_trace();
    }
    world.run()?;
    let text = trace.then(|| world.engine.trace_text());
    Ok((world.report(seed)?, text))
}

impl<'a> World<'a> {
    fn build(cfg: &'a ScenarioConfig, seed: u64) -> Result<Self, HammerError> {
        let mut engine: Engine<Ev> = Engine::new();
        let stations = match cfg.topology {
            Topology::Combined { head_cores } => {
                let cpu = engine.add_station(StationSpec::cpu("head-cpu", head_cores))?;
                let disk = engine.add_station(StationSpec::fcfs("head-disk", 1.0))?;
                BrokerStations {
                    svc_cpu: cpu,
                    db_cpu: cpu,
                    db_disk: disk,
                }
            }
            Topology::Split {
                service_cores,
                db_cores,
            } => BrokerStations {
                svc_cpu: engine.add_station(StationSpec::cpu("svc-cpu", service_cores))?,
                db_cpu: engine.add_station(StationSpec::cpu("db-cpu", db_cores))?,
                db_disk: engine.add_station(StationSpec::fcfs("db-disk", 1.0))?,
            },
        };
        let specs = cfg.pools.specs();
        let pools = Pools::new(&mut engine, &specs)?;

        let mut store = Store::new();
        let catalog = Catalog::create(&mut store)?;
        let entries = seed_catalog(
            &SeedSpec {
                n_files: cfg.catalog.n_files as usize,
                n_groups: cfg.catalog.n_groups,
                file_size: cfg.workload.job.file_size as i64,
                replicas_per_file: cfg.catalog.replicas_per_file as usize,
            },
            &cfg.pools.replicas(),
            seed,
        );
        load_entries(&catalog, &mut store, &entries)?;
        let catalog = catalog.with_filesystems(cfg.pools.replicas());
        let mut broker = Broker::new(store, catalog, cfg.costs, cfg.buffer.model(), stations)?;
        let dataset: Vec<String> = (0..cfg.catalog.dataset_files).map(dataset_pfn).collect();
        broker.seed_history(cfg.history.get_rows, cfg.history.put_rows, &dataset, seed)?;
        for ix in &cfg.indices {
            let t = broker.store.table_id(&ix.table)?;
            broker
                .store
                .add_index(t, IndexSpec::new(ix.name.clone(), ix.columns.iter().cloned()))?;
            if let Some(old) = &ix.replaces {
                broker.store.drop_index(t, old)?;
            }
        }

        let monitors = cfg.monitors.agents();
        for (i, m) in monitors.iter().enumerate() {
            if m.enabled {
                engine.schedule(m.period, Ev::Monitor(i))?;
            }
        }

        Ok(Self {
            cfg,
            engine,
            broker,
            pools,
            monitors,
            dataset,
            jobs: BTreeMap::new(),
            transfers: BTreeMap::new(),
            log: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6a6f_6273),
            queued: (0..cfg.workload.n_jobs).collect(),
            running: 0,
            max_running: 0,
            finished: 0,
        })
    }

    fn admit(&mut self) -> Result<(), HammerError> {
        let w = &self.cfg.workload;
        while self.running < w.slots {
            let Some(j) = self.queued.pop_front() else {
                break;
            };
            self.running += 1;
            self.max_running = self.max_running.max(self.running);
            let delay = if w.admission_jitter > 0.0 {
                self.rng.gen_range(0.0..w.admission_jitter)
            } else {
                0.0
            };
            self.engine.schedule_in(delay, Ev::Start(j))?;
        }
        Ok(())
    }

    fn run(&mut self) -> Result<(), HammerError> {
        self.admit()?;
        let n_jobs = self.cfg.workload.n_jobs;
        let cap = self.cfg.workload.duration_cap;
        while self.finished < n_jobs {
            let Some(t) = self.engine.peek_time() else {
                break;
            };
            if t > cap {
                break;
            }
            let (_, ev) = self.engine.next().expect("peeked");
            match ev {
                Ev::Broker(b) => {
                    if let Some(done) = self.broker.on_event(&mut self.engine, b) {
                        self.on_reply(done)?;
                    }
                }
                Ev::Start(j) => {
                    let now = self.engine.now();
                    self.jobs.insert(
                        j,
                        Job {
                            start: now,
                            cpu: 0.0,
                            events: 0,
                            file: 0,
                            ok: 0,
                            failed: 0,
                            token: None,
                            phase: Phase::Get,
                            output: false,
                            end: None,
                        },
                    );
                    self.next_file(j)?;
                }
                Ev::Transfer(id, sig) => {
                    if let Some(out) = self.pools.on_signal(&mut self.engine, id, sig) {
                        let j = self.transfers.remove(&id).expect("transfer owner");
                        self.on_transfer(j, out.ok)?;
                    }
                }
                Ev::Processed(j) => {
                    let spec = &self.cfg.workload.job;
                    let job = self.jobs.get_mut(&j).expect("job");
                    job.events += spec.events_per_file;
                    self.release(j, Outcome::Done)?;
                }
                Ev::Monitor(i) => {
                    let m = &self.monitors[i];
                    let now = self.engine.now();
                    let stats = m.tick(&self.broker.store, &self.broker.catalog, now)?;
                    self.broker
                        .charge_db(&mut self.engine, MONITOR_OWNER, &stats, 0)?;
                    let period = m.period;
                    self.engine.schedule_in(period, Ev::Monitor(i))?;
                }
            }
        }
        Ok(())
    }

    fn owner(j: u32) -> u64 {
        u64::from(j)
    }

    /// Starts the job's next input file, its output put, or ends it.
    fn next_file(&mut self, j: u32) -> Result<(), HammerError> {
        let spec = &self.cfg.workload.job;
        let job = self.jobs.get_mut(&j).expect("job");
        job.token = None;
        if job.file < spec.n_files {
            let k = u64::from(j) * u64::from(spec.n_files) + u64::from(job.file);
            // consecutive jobs read consecutive slices of the dataset
            let pfn = self.dataset[(k % self.dataset.len() as u64) as usize].clone();
            job.file += 1;
            job.phase = Phase::Get;
            job.output = false;
            let r = self.broker.submit_get(
                &mut self.engine,
                Self::owner(j),
                &spec.dn,
                &pfn,
                spec.pin_lifetime,
            );
            return self.sync_failure(j, r.map(|_| ()));
        }
        if spec.output_size > 0 && !job.output {
            job.output = true;
            job.phase = Phase::Get;
            let pfn = format!("/dpm/site/home/atlas/user/{}/job{j:05}.root", self.cfg.name);
            let r = self.broker.submit_put(
                &mut self.engine,
                &mut self.pools,
                Self::owner(j),
                &spec.dn,
                &pfn,
                spec.output_size,
            );
            return self.sync_failure(j, r.map(|_| ()));
        }
        self.end_job(j)
    }

    fn end_job(&mut self, j: u32) -> Result<(), HammerError> {
        let now = self.engine.now();
        let job = self.jobs.get_mut(&j).expect("job");
        job.end = Some(now);
        self.running -= 1;
        self.finished += 1;
        self.admit()
    }

    fn log(&mut self, ok: bool) {
        self.log.push(TransferRecord {
            t: self.engine.now(),
            dn: self.cfg.workload.job.dn.clone(),
            ok,
        });
    }

    /// A call refused before any row was written still counts as a failed
    /// transfer for the job.
    fn sync_failure(&mut self, j: u32, r: Result<(), BrokerError>) -> Result<(), HammerError> {
        match r {
            Ok(()) => Ok(()),
            Err(
                BrokerError::ServiceStopped(_)
                | BrokerError::Locked(_)
                | BrokerError::NoSpace(_)
                | BrokerError::NotFound(_),
            ) => {
                self.log(false);
                self.after_failure(j)
            }
            Err(e) => Err(e.into()),
        }
    }

    fn after_failure(&mut self, j: u32) -> Result<(), HammerError> {
        let job = self.jobs.get_mut(&j).expect("job");
        job.failed += 1;
        match self.cfg.workload.on_failure {
            OnFailure::Skip => self.next_file(j),
            OnFailure::Abort => self.end_job(j),
        }
    }

    fn on_reply(&mut self, done: CallDone) -> Result<(), HammerError> {
        if done.owner == MONITOR_OWNER || done.owner >= u64::from(self.cfg.workload.n_jobs) {
            return Ok(());
        }
        let j = done.owner as u32;
        let phase = self.jobs[&j].phase;
        match (phase, done.reply) {
            (Phase::Get, Ok(Reply::Token(t))) => {
                let job = self.jobs.get_mut(&j).expect("job");
                job.token = Some(t);
                job.phase = Phase::Poll;
                let r = self.broker.poll(&mut self.engine, Self::owner(j), t);
                self.sync_failure(j, r.map(|_| ()))
            }
            (Phase::Poll, Ok(Reply::Status(s))) => {
                let t = self.jobs[&j].token.expect("token");
                match s {
                    Status::Ready => {
                        self.jobs.get_mut(&j).expect("job").phase = Phase::Mark;
                        let r = self.broker.mark_running(&mut self.engine, Self::owner(j), t);
                        self.sync_failure(j, r.map(|_| ()))
                    }
                    Status::Failed => {
                        self.log(false);
                        self.after_failure(j)
                    }
                    _ => {
                        let r = self.broker.poll(&mut self.engine, Self::owner(j), t);
                        self.sync_failure(j, r.map(|_| ()))
                    }
                }
            }
            (Phase::Mark, Ok(_)) => {
                let t = self.jobs[&j].token.expect("token");
                let (replica, bytes) = self.broker.transfer_target(t)?;
                self.jobs.get_mut(&j).expect("job").phase = Phase::Transfer;
                let id = self.pools.start_transfer(
                    &mut self.engine,
                    &replica.pool,
                    bytes.max(1),
                    self.cfg.timeout,
                    Self::owner(j),
                    Ev::Transfer,
                )?;
                self.transfers.insert(id, j);
                Ok(())
            }
            (Phase::Release(outcome), Ok(_)) => {
                self.log(outcome == Outcome::Done);
                let job = self.jobs.get_mut(&j).expect("job");
                if outcome == Outcome::Done {
                    if !job.output {
                        job.ok += 1;
                    }
                    self.next_file(j)
                } else {
                    self.after_failure(j)
                }
            }
            (_, Err(_)) => {
                self.log(false);
                self.after_failure(j)
            }
            (p, Ok(r)) => unreachable!("reply {r:?} in phase {p:?}"),
        }
    }

    fn on_transfer(&mut self, j: u32, ok: bool) -> Result<(), HammerError> {
        let spec = &self.cfg.workload.job;
        let job = self.jobs.get_mut(&j).expect("job");
        if !ok {
            return self.release(j, Outcome::Failed);
        }
        if job.output {
            return self.release(j, Outcome::Done);
        }
        let cpu = spec.events_per_file as f64 * spec.t_cpu_per_event;
        job.cpu += cpu;
        job.phase = Phase::Process;
        self.engine.schedule_in(cpu, Ev::Processed(j))?;
        Ok(())
    }

    fn release(&mut self, j: u32, outcome: Outcome) -> Result<(), HammerError> {
        let job = self.jobs.get_mut(&j).expect("job");
        job.phase = Phase::Release(outcome);
        let t = job.token.expect("token");
        let r = self
            .broker
            .release(&mut self.engine, &mut self.pools, Self::owner(j), t, outcome);
        match r {
            Ok(_) => Ok(()),
            Err(e) => {
                // the data was read but the request could not be closed
                self.sync_failure(j, Err(e))
            }
        }
    }

    fn terminal_counts(&self) -> Result<(u64, u64, u64), HammerError> {
        let mut done = 0;
        let mut failed = 0;
        let mut get_done = 0;
        for table in [GET_FILEREQ_TABLE, PUT_FILEREQ_TABLE] {
            let id = self.broker.table(table)?;
            let sel = self.broker.store.select(
                id,
                &Predicate::all().ge("r_rowid", (self.history_reqs() + 1) as i64),
                &Projection::columns(["status"]),
            )?;
            for (_, row) in &sel.rows {
                match row[0].as_text() {
                    Some("DONE") => {
                        done += 1;
                        if table == GET_FILEREQ_TABLE {
                            get_done += 1;
                        }
                    }
                    Some("FAILED") => failed += 1,
                    _ => {}
                }
            }
        }
        Ok((done, failed, get_done))
    }

    fn history_reqs(&self) -> u64 {
        self.cfg.history.get_rows + self.cfg.history.put_rows
    }

    fn report(self, seed: u64) -> Result<RunReport, HammerError> {
        let now = self.engine.now();
        let makespan = self
            .jobs
            .values()
            .filter_map(|j| j.end)
            .fold(now.min(self.cfg.workload.duration_cap), f64::max);
        let dn = &self.cfg.workload.job.dn;
        let jobs: Vec<JobResult> = self
            .jobs
            .iter()
            .map(|(&id, j)| {
                let end = j.end.unwrap_or(makespan);
                let wall = end - j.start;
                JobResult {
                    job: id,
                    dn: dn.clone(),
                    start: j.start,
                    end,
                    walltime: wall,
                    cputime: j.cpu,
                    events_done: j.events,
                    event_rate: if wall > 0.0 { j.events as f64 / wall } else { 0.0 },
                    efficiency: if wall > 0.0 { (j.cpu / wall).min(1.0) } else { 0.0 },
                    files_ok: j.ok,
                    files_failed: j.failed,
                    finished: j.end.is_some(),
                }
            })
            .collect();
        let (done, failed, get_done) = self.terminal_counts()?;
        let roles = {
            let specs = self.cfg.pools.specs();
            let (svc, cpu, disk) = match self.cfg.topology {
                Topology::Combined { .. } => ("head-cpu", "head-cpu", "head-disk"),
                Topology::Split { .. } => ("svc-cpu", "db-cpu", "db-disk"),
            };
            StationRoles {
                svc_cpu: svc.into(),
                db_cpu: cpu.into(),
                db_disk: disk.into(),
                links: specs.iter().map(|p| format!("link:{}", p.name)).collect(),
            }
        };
        let mut utilisation = Vec::new();
        for (id, _) in self.engine.stations() {
            utilisation.push(self.engine.utilisation(id, self.cfg.bucket_seconds, makespan)?);
        }
        let transfers = bucketize(&self.log, self.cfg.bucket_seconds);
        let summary = RunSummary::new(&self.cfg.name, &jobs, &transfers, &utilisation, makespan);
        Ok(RunReport {
            report_version: REPORT_VERSION,
            scenario: self.cfg.clone(),
            seed,
            makespan,
            max_running: self.max_running,
            jobs,
            transfers,
            stations: roles,
            utilisation,
            broker: self.broker.counters().clone(),
            hit_rate: self.broker.buffer().hit_rate(),
            done_filereqs: done,
            failed_filereqs: failed,
            done_get_events: get_done * self.cfg.workload.job.events_per_file,
            summary,
        })
    }
}

#[cfg(test)]
mod tests;
