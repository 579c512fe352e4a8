//! Online index migration by copy-and-rename, the locking build it
//! replaces, and verification of the result.
//!
//! The online procedure:
//!
//! 1. find the historical boundary of the live table;
//! 2. create `<table>_copy` with the existing indices plus the new one;
//! 3. copy rows `[1, boundary]` while the broker keeps writing;
//! 4. pause the broker;
//! 5. copy the remaining rows;
//! 6. rename `<table>` to `<table>_old` and `<table>_copy` to `<table>`;
//! 7. resume the broker.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{
    Broker, BrokerError, BrokerEvent, BrokerStations, CallDone, Kind, Outcome, Reply, Token,
    REQ_TABLE,
};
use crate::dbmodel::{BufferPoolModel, CostProfile};
use crate::desengine::{Engine, SimTime, StationSpec};
use crate::namespace::Catalog;
use crate::pools::{FilesystemSpec, PoolSpec, Pools};
use crate::tablestore::{
    IndexBuild, IndexSpec, LoggedWrite, OwnerId, Row, RowId, Store, StoreError, Value,
};

/// Owner tag of migration work in the engine and table store.
pub const MIGRATOR: u64 = u64::MAX - 1;
const MIGRATOR_OWNER: OwnerId = OwnerId(MIGRATOR);

#[derive(Debug, Clone, PartialEq, Error)]
pub enum MigrateError {
    #[error("table `{0}` has no status column")]
    NoStatusColumn(String),
    #[error("index on ({columns}) already present on `{table}`")]
    IndexExists { table: String, columns: String },
    #[error("rename failed, original table left in place: {0}")]
    Rename(StoreError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Broker(#[from] BrokerError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PauseScope {
    Get,
    Put,
    All,
}

impl PauseScope {
    fn kinds(self) -> &'static [Kind] {
        match self {
            PauseScope::Get => &[Kind::Get],
            PauseScope::Put => &[Kind::Put],
            PauseScope::All => &[Kind::Get, Kind::Put],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MigrationReport {
    pub table: String,
    pub index: String,
    pub boundary_rowid: RowId,
    pub rows_precopied: u64,
    pub rows_tailcopied: u64,
    pub precopy_duration: SimTime,
    pub stop_window: SimTime,
    pub failed_requests_during_stop: u64,
    pub verified: bool,
    /// False for standalone runs, where the pause and resume steps are no-ops.
    pub broker_present: bool,
}

fn is_terminal(v: &Value) -> bool {
    matches!(v.as_text(), Some("DONE" | "FAILED"))
}

/// Largest rowid `r` such that every row up to `r` is terminal and belongs to
/// a terminal request. Also returns the rows read to find it.
pub fn historical_boundary(store: &Store, table: &str) -> Result<(RowId, u64), MigrateError> {
    let id = store.table_id(table)?;
    let schema = store.schema(id)?;
    let status = schema
        .position("status")
        .ok_or_else(|| MigrateError::NoStatusColumn(table.to_owned()))?;
    let parent = schema.position("r_rowid");
    let req = match parent {
        Some(_) if table != REQ_TABLE => store.table_id(REQ_TABLE).ok(),
        _ => None,
    };
    let req_status = req.and_then(|r| store.schema(r).ok()?.position("status"));
    let mut boundary = 0;
    let mut read = 0;
    for (rowid, row) in store.rows(id)? {
        read += 1;
        let mut historical = is_terminal(&row[status]);
        if let (true, Some(p), Some(r), Some(rs)) = (historical, parent, req, req_status) {
            read += 1;
            let parent_row = row[p].as_int().and_then(|pr| store.get(r, pr as RowId).ok().flatten());
            historical = parent_row.is_some_and(|pr| is_terminal(&pr[rs]));
        }
        if !historical {
            break;
        }
        boundary = rowid;
    }
    Ok((boundary, read))
}

/// True iff the old rows with the logged writes applied in order are exactly
/// the new table's rows.
pub fn verify(old: &[(RowId, Row)], new: &[(RowId, Row)], log: &[LoggedWrite]) -> bool {
    let mut expect: BTreeMap<RowId, &Row> = old.iter().map(|(r, row)| (*r, row)).collect();
    for w in log {
        expect.insert(w.rowid, &w.row);
    }
    expect.len() == new.len() && new.iter().all(|(r, row)| expect.get(r) == Some(&row))
}

fn rows_of(store: &Store, table: &str) -> Result<Vec<(RowId, Row)>, MigrateError> {
    let id = store.table_id(table)?;
    Ok(store.rows(id)?.map(|(r, row)| (r, row.clone())).collect())
}

fn check_new_index(store: &Store, table: &str, spec: &IndexSpec) -> Result<(), MigrateError> {
    let id = store.table_id(table)?;
    if store.indices(id)?.iter().any(|i| i.columns == spec.columns || i.name == spec.name) {
        return Err(MigrateError::IndexExists {
            table: table.to_owned(),
            columns: spec.columns.join(","),
        });
    }
    Ok(())
}

/// Steps 2 and 3: the copy table and its historical prefix.
fn create_copy(
    store: &mut Store,
    table: &str,
    spec: &IndexSpec,
    boundary: RowId,
) -> Result<u64, MigrateError> {
    let live = store.table_id(table)?;
    let copy_name = format!("{table}_copy");
    let schema = store.schema(live)?.renamed(&copy_name);
    let indices = store.indices(live)?;
    let copy = store.create_table(schema)?;
    for idx in indices {
        store.add_index(copy, idx)?;
    }
    store.add_index(copy, spec.clone())?;
    store.track_writes(table);
    Ok(store.copy_rows(live, copy, ..=boundary, MIGRATOR_OWNER)? as u64)
}

/// Step 6; on failure the copy is dropped and the live table is untouched.
fn swap_in(store: &mut Store, table: &str) -> Result<(), MigrateError> {
    let copy_name = format!("{table}_copy");
    let old_name = format!("{table}_old");
    if let Err(e) = store.rename_tables(&[(table, &old_name), (&copy_name, table)]) {
        store.drop_table(&copy_name)?;
        store.take_write_log(table);
        return Err(MigrateError::Rename(e));
    }
    Ok(())
}

fn tail_copy(store: &mut Store, table: &str, boundary: RowId) -> Result<u64, MigrateError> {
    let live = store.table_id(table)?;
    let copy = store.table_id(&format!("{table}_copy"))?;
    Ok(store.copy_rows(live, copy, boundary + 1.., MIGRATOR_OWNER)? as u64)
}

/// Standalone migration of a snapshot: no broker is running, so the stop
/// steps are no-ops and durations are `rows × t_row`.
pub fn reindex_offline(
    store: &mut Store,
    table: &str,
    spec: &IndexSpec,
    costs: &CostProfile,
) -> Result<MigrationReport, MigrateError> {
    check_new_index(store, table, spec)?;
    let (boundary, _) = historical_boundary(store, table)?;
    let pre = create_copy(store, table, spec, boundary)?;
    let tail = tail_copy(store, table, boundary)?;
    swap_in(store, table)?;
    let log = store.take_write_log(table);
    let verified = verify(
        &rows_of(store, &format!("{table}_old"))?,
        &rows_of(store, table)?,
        &log,
    );
    Ok(MigrationReport {
        table: table.to_owned(),
        index: spec.name.clone(),
        boundary_rowid: boundary,
        rows_precopied: pre,
        rows_tailcopied: tail,
        precopy_duration: pre as f64 * costs.t_row,
        stop_window: tail as f64 * costs.t_row,
        failed_requests_during_stop: 0,
        verified,
        broker_present: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Boundary,
    Precopy,
    Tail,
    Done,
}

/// The online procedure as a process alongside live broker traffic. Feed it
/// every [`CallDone`] whose owner is [`MIGRATOR`].
pub struct OnlineReindex {
    table: String,
    spec: IndexSpec,
    scope: PauseScope,
    phase: Phase,
    boundary: RowId,
    pre: u64,
    tail: u64,
    precopy_start: SimTime,
    precopy_duration: SimTime,
    paused_at: Option<SimTime>,
    resumed_at: Option<SimTime>,
}

impl OnlineReindex {
    pub fn start<E: From<BrokerEvent>>(
        broker: &mut Broker,
        engine: &mut Engine<E>,
        table: &str,
        spec: IndexSpec,
        scope: PauseScope,
    ) -> Result<Self, MigrateError> {
        check_new_index(&broker.store, table, &spec)?;
        let (boundary, read) = historical_boundary(&broker.store, table)?;
        broker.charge_db(engine, MIGRATOR, &[], read)?;
        Ok(Self {
            table: table.to_owned(),
            spec,
            scope,
            phase: Phase::Boundary,
            boundary,
            pre: 0,
            tail: 0,
            precopy_start: 0.0,
            precopy_duration: 0.0,
            paused_at: None,
            resumed_at: None,
        })
    }

    pub fn is_done(&self) -> bool {
        self.phase == Phase::Done
    }

    /// `[pause, resume]`, once known.
    pub fn stop_interval(&self) -> Option<(SimTime, SimTime)> {
        Some((self.paused_at?, self.resumed_at?))
    }

    /// Advances after the previous step's charge has been served.
    pub fn on_charged<E: From<BrokerEvent>>(
        &mut self,
        broker: &mut Broker,
        engine: &mut Engine<E>,
    ) -> Result<(), MigrateError> {
        let now = engine.now();
        match self.phase {
            Phase::Boundary => {
                self.pre = create_copy(&mut broker.store, &self.table, &self.spec, self.boundary)?;
                self.precopy_start = now;
                broker.charge_db(engine, MIGRATOR, &[], self.pre)?;
                self.phase = Phase::Precopy;
            }
            Phase::Precopy => {
                self.precopy_duration = now - self.precopy_start;
                for k in self.scope.kinds() {
                    broker.pause(*k)?;
                }
                self.paused_at = Some(now);
                self.tail = tail_copy(&mut broker.store, &self.table, self.boundary)?;
                broker.charge_db(engine, MIGRATOR, &[], self.tail)?;
                self.phase = Phase::Tail;
            }
            Phase::Tail => {
                let swapped = swap_in(&mut broker.store, &self.table);
                for k in self.scope.kinds() {
                    broker.resume(*k)?;
                }
                self.resumed_at = Some(now);
                self.phase = Phase::Done;
                swapped?;
            }
            Phase::Done => {}
        }
        Ok(())
    }

    /// Final report; call after traffic has drained so that every write made
    /// to the new table is in the log.
    pub fn finish(
        &self,
        broker: &mut Broker,
        failed_during_stop: u64,
    ) -> Result<MigrationReport, MigrateError> {
        let log = broker.store.take_write_log(&self.table);
        let verified = self.is_done()
            && verify(
                &rows_of(&broker.store, &format!("{}_old", self.table))?,
                &rows_of(&broker.store, &self.table)?,
                &log,
            );
        let stop = match self.stop_interval() {
            Some((a, b)) => b - a,
            None => 0.0,
        };
        Ok(MigrationReport {
            table: self.table.clone(),
            index: self.spec.name.clone(),
            boundary_rowid: self.boundary,
            rows_precopied: self.pre,
            rows_tailcopied: self.tail,
            precopy_duration: self.precopy_duration,
            stop_window: stop,
            failed_requests_during_stop: failed_during_stop,
            verified,
            broker_present: true,
        })
    }
}

/// The locking build: the table is unavailable for `rows × t_row`.
pub struct NaiveBuild {
    build: Option<IndexBuild>,
    started: SimTime,
    ended: Option<SimTime>,
}

impl NaiveBuild {
    pub fn start<E: From<BrokerEvent>>(
        broker: &mut Broker,
        engine: &mut Engine<E>,
        table: &str,
        spec: IndexSpec,
    ) -> Result<Self, MigrateError> {
        let id = broker.store.table_id(table)?;
        let build = broker
            .store
            .begin_index_build(id, spec, MIGRATOR_OWNER, engine.now())?;
        broker.charge_db(engine, MIGRATOR, &[], build.duration_rows)?;
        Ok(Self {
            build: Some(build),
            started: engine.now(),
            ended: None,
        })
    }

    pub fn on_charged(&mut self, broker: &mut Broker, now: SimTime) -> Result<(), MigrateError> {
        if let Some(b) = self.build.take() {
            broker.store.finish_index_build(b)?;
            self.ended = Some(now);
        }
        Ok(())
    }

    pub fn lock_interval(&self) -> Option<(SimTime, SimTime)> {
        Some((self.started, self.ended?))
    }
}

// ---------------------------------------------------------------------------
// live-traffic harness

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveConfig {
    /// Historical put requests present before traffic starts.
    pub table_rows: u64,
    /// Concurrent clients, each looping put -> transfer -> release.
    pub clients: u32,
    pub mean_hold: f64,
    pub retry_after: f64,
    /// When the migration (or locking build) starts.
    pub start_at: SimTime,
    /// Traffic stops being generated after this time.
    pub traffic_until: SimTime,
    pub scope: PauseScope,
    pub costs: CostProfile,
    pub seed: u64,
}

impl Default for LiveConfig {
    fn default() -> Self {
        Self {
            table_rows: 10_000,
            clients: 100,
            mean_hold: 10.0,
            retry_after: 0.05,
            start_at: 30.0,
            traffic_until: 60.0,
            scope: PauseScope::All,
            costs: CostProfile {
                t_row: 2e-4,
                ..CostProfile::default()
            },
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Online,
    Naive,
}

/// A failed client call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub t: SimTime,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiveRun {
    pub method: Method,
    pub total_rows: u64,
    pub report: Option<MigrationReport>,
    /// `[pause, resume]` for online runs, the lock window for naive ones.
    pub window: Option<(SimTime, SimTime)>,
    pub failures: Vec<Failure>,
    pub completed: u64,
}

impl LiveRun {
    pub fn window_len(&self) -> f64 {
        self.window.map_or(0.0, |(a, b)| b - a)
    }

    pub fn failures_outside_window(&self, code: &str) -> usize {
        let (a, b) = self.window.unwrap_or((f64::INFINITY, f64::NEG_INFINITY));
        self.failures
            .iter()
            .filter(|f| f.code == code && (f.t < a || f.t > b))
            .count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum LiveEv {
    B(BrokerEvent),
    Client(u32),
    Mark(u32),
    Hold(u32),
    Start,
}

impl From<BrokerEvent> for LiveEv {
    fn from(e: BrokerEvent) -> Self {
        LiveEv::B(e)
    }
}

#[derive(Debug, Clone, Copy)]
enum ClientState {
    Submitting,
    Ready(Token),
    Starting(Token),
    Holding(Token),
    Releasing,
}

/// Migrates `dpm_put_filereq` (adding `status_idx`) while `clients` keep
/// issuing puts.
pub fn run_live(cfg: &LiveConfig, method: Method) -> Result<LiveRun, MigrateError> {
    let mut engine: Engine<LiveEv> = Engine::new();
    let cpu = engine
        .add_station(StationSpec::cpu("db-cpu", 2))
        .expect("valid station");
    let disk = engine
        .add_station(StationSpec::fcfs("db-disk", 1.0))
        .expect("valid station");
    let mut pools = Pools::new(
        &mut engine,
        &[PoolSpec {
            name: "pool00".into(),
            link_capacity: 1e9,
            filesystems: vec![FilesystemSpec {
                name: "fs1".into(),
                capacity: u64::MAX / 2,
            }],
        }],
    )
    .expect("valid pool");
    let mut store = Store::new();
    let catalog = Catalog::create(&mut store).map_err(|e| match e {
        crate::namespace::NamespaceError::Store(s) => MigrateError::Store(s),
        other => MigrateError::Broker(BrokerError::Namespace(other)),
    })?;
    let mut broker = Broker::new(
        store,
        catalog,
        cfg.costs,
        BufferPoolModel::default(),
        BrokerStations {
            svc_cpu: cpu,
            db_cpu: cpu,
            db_disk: disk,
        },
    )?;
    broker.seed_history(0, cfg.table_rows, &[], cfg.seed)?;
    let table = crate::broker::PUT_FILEREQ_TABLE;
    let spec = IndexSpec::new("status_idx", ["status"]);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut states: HashMap<u32, ClientState> = HashMap::new();
    for c in 0..cfg.clients {
        engine
            .schedule(rng.gen_range(0.0..cfg.start_at.max(1e-3)), LiveEv::Client(c))
            .expect("future");
    }
    engine.schedule(cfg.start_at, LiveEv::Start).expect("future");

    let mut online: Option<OnlineReindex> = None;
    let mut naive: Option<NaiveBuild> = None;
    let mut failures = Vec::new();
    let mut completed = 0;
    let mut serial = 0u64;
    let mut total_rows = cfg.table_rows;

    let fail = |failures: &mut Vec<Failure>, engine: &mut Engine<LiveEv>, c: u32, e: &BrokerError, retry: f64, until: f64| {
        failures.push(Failure {
            t: engine.now(),
            code: e.code().to_owned(),
        });
        if engine.now() < until {
            engine.schedule_in(retry, LiveEv::Client(c)).expect("future");
        }
    };

    while let Some((now, ev)) = engine.next() {
        match ev {
            LiveEv::Start => match method {
                Method::Online => {
                    total_rows = broker.store.len(broker.table(table)?)? as u64;
                    online = Some(OnlineReindex::start(&mut broker, &mut engine, table, spec.clone(), cfg.scope)?);
                }
                Method::Naive => {
                    total_rows = broker.store.len(broker.table(table)?)? as u64;
                    naive = Some(NaiveBuild::start(&mut broker, &mut engine, table, spec.clone())?);
                }
            },
            LiveEv::Client(c) => {
                if now >= cfg.traffic_until {
                    continue;
                }
                serial += 1;
                let pfn = format!("/dpm/site/out/c{c}/{serial}");
                match broker.submit_put(&mut engine, &mut pools, u64::from(c), "/CN=client", &pfn, 1) {
                    Ok(_) => {
                        states.insert(c, ClientState::Submitting);
                    }
                    Err(e) => fail(&mut failures, &mut engine, c, &e, cfg.retry_after, cfg.traffic_until),
                }
            }
            LiveEv::Mark(c) => {
                let Some(ClientState::Ready(t)) = states.get(&c).copied() else {
                    continue;
                };
                match broker.mark_running(&mut engine, u64::from(c), t) {
                    Ok(_) => {
                        states.insert(c, ClientState::Starting(t));
                    }
                    Err(e) => {
                        failures.push(Failure {
                            t: now,
                            code: e.code().to_owned(),
                        });
                        engine.schedule_in(cfg.retry_after, LiveEv::Mark(c)).expect("future");
                    }
                }
            }
            LiveEv::Hold(c) => {
                let Some(ClientState::Holding(t)) = states.get(&c).copied() else {
                    continue;
                };
                match broker.release(&mut engine, &mut pools, u64::from(c), t, Outcome::Done) {
                    Ok(_) => {
                        states.insert(c, ClientState::Releasing);
                    }
                    Err(e) => {
                        failures.push(Failure {
                            t: now,
                            code: e.code().to_owned(),
                        });
                        engine.schedule_in(cfg.retry_after, LiveEv::Hold(c)).expect("future");
                    }
                }
            }
            LiveEv::B(b) => {
                let Some(CallDone { owner, reply, .. }) = broker.on_event(&mut engine, b) else {
                    continue;
                };
                if owner == MIGRATOR {
                    if let Some(m) = online.as_mut() {
                        m.on_charged(&mut broker, &mut engine)?;
                    }
                    if let Some(n) = naive.as_mut() {
                        n.on_charged(&mut broker, now)?;
                    }
                    continue;
                }
                let c = owner as u32;
                let state = states.get(&c).copied();
                match (state, reply) {
                    (Some(ClientState::Submitting), Ok(Reply::Token(t))) => {
                        states.insert(c, ClientState::Ready(t));
                        engine.schedule_in(0.0, LiveEv::Mark(c)).expect("future");
                    }
                    (Some(ClientState::Starting(t)), Ok(_)) => {
                        states.insert(c, ClientState::Holding(t));
                        let hold = -cfg.mean_hold * (1.0 - rng.gen::<f64>()).ln();
                        engine.schedule_in(hold, LiveEv::Hold(c)).expect("future");
                    }
                    (Some(ClientState::Releasing), Ok(_)) => {
                        completed += 1;
                        engine.schedule_in(0.0, LiveEv::Client(c)).expect("future");
                    }
                    (_, Err(e)) => fail(&mut failures, &mut engine, c, &e, cfg.retry_after, cfg.traffic_until),
                    _ => {}
                }
            }
        }
    }

    let (report, window) = match (online, naive) {
        (Some(m), _) => {
            let window = m.stop_interval();
            let in_window = window.map_or(0, |(a, b)| {
                failures.iter().filter(|f| f.t >= a && f.t <= b).count() as u64
            });
            (Some(m.finish(&mut broker, in_window)?), window)
        }
        (None, Some(n)) => (None, n.lock_interval()),
        _ => (None, None),
    };
    Ok(LiveRun {
        method,
        total_rows,
        report,
        window,
        failures,
        completed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::broker::{put_filereq_schema, req_schema};
    use crate::tablestore::{ColumnKind, TableSchema};

    fn status_table(statuses: &[&str]) -> Store {
        let mut s = Store::new();
        let t = s
            .create_table(TableSchema::new("t").column("status", ColumnKind::Text))
            .unwrap();
        for st in statuses {
            s.insert(t, OwnerId(1), vec![(*st).into()]).unwrap();
        }
        s
    }

    /// Definition oracle: try every candidate rowid.
    fn oracle_boundary(statuses: &[&str]) -> RowId {
        (0..=statuses.len())
            .rev()
            .find(|&r| statuses[..r].iter().all(|s| *s == "DONE" || *s == "FAILED"))
            .unwrap() as RowId
    }

    #[test]
    fn boundary_examples() {
        let all = ["DONE"; 9];
        assert_eq!(historical_boundary(&status_table(&all), "t").unwrap().0, 9);
        let mut mixed = ["DONE"; 9];
        mixed[4] = "PENDING";
        assert_eq!(historical_boundary(&status_table(&mixed), "t").unwrap().0, 4);
        assert_eq!(oracle_boundary(&mixed), 4);
        assert_eq!(historical_boundary(&status_table(&[]), "t").unwrap().0, 0);
        let mut s = Store::new();
        s.create_table(TableSchema::new("x").column("a", ColumnKind::Integer)).unwrap();
        assert!(matches!(historical_boundary(&s, "x"), Err(MigrateError::NoStatusColumn(_))));
    }

    #[test]
    fn boundary_matches_oracle_on_random_tables() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let n = rng.gen_range(0..30);
            let st: Vec<&str> = (0..n)
                .map(|_| ["DONE", "FAILED", "PENDING", "READY", "RUNNING"][rng.gen_range(0..5)])
                .collect();
            assert_eq!(
                historical_boundary(&status_table(&st), "t").unwrap().0,
                oracle_boundary(&st)
            );
        }
    }

    #[test]
    fn boundary_requires_terminal_parent() {
        let mut s = Store::new();
        let req = s.create_table(req_schema()).unwrap();
        let put = s.create_table(put_filereq_schema()).unwrap();
        let o = OwnerId(1);
        for (i, rs) in ["DONE", "RUNNING", "DONE"].iter().enumerate() {
            s.insert(
                req,
                o,
                vec![format!("t{i}").into(), "dn".into(), "put".into(), 0.0.into(), Value::Null, (*rs).into()],
            )
            .unwrap();
            s.insert(
                put,
                o,
                vec![(i as i64 + 1).into(), "/p".into(), "DONE".into(), Value::Null, Value::Null, 0.into()],
            )
            .unwrap();
        }
        assert_eq!(historical_boundary(&s, "dpm_put_filereq").unwrap().0, 1);
    }

    #[test]
    fn verify_detects_corruption() {
        let old = vec![(1, vec![Value::from("a")]), (2, vec![Value::from("b")])];
        let log = vec![
            LoggedWrite { rowid: 2, row: vec!["c".into()] },
            LoggedWrite { rowid: 3, row: vec!["d".into()] },
        ];
        let good = vec![(1, vec!["a".into()]), (2, vec!["c".into()]), (3, vec!["d".into()])];
        assert!(verify(&old, &good, &log));
        let mut bad = good.clone();
        bad[0].1[0] = "z".into();
        assert!(!verify(&old, &bad, &log));
        assert!(!verify(&old, &good[..2], &log));
    }

    fn snapshot_store(hist: u64, tail: u64) -> Store {
        let mut s = Store::new();
        let req = s.create_table(req_schema()).unwrap();
        let put = s.create_table(put_filereq_schema()).unwrap();
        s.add_index(put, IndexSpec::new("put_pfn_idx", ["pfn"])).unwrap();
        let o = OwnerId(1);
        for i in 0..hist + tail {
            let st = if i < hist { "DONE" } else { "PENDING" };
            s.insert(
                req,
                o,
                vec![format!("t{i}").into(), "dn".into(), "put".into(), 0.0.into(), Value::Null, st.into()],
            )
            .unwrap();
            s.insert(
                put,
                o,
                vec![(i as i64 + 1).into(), format!("/p{i}").into(), st.into(), Value::Null, Value::Null, 0.into()],
            )
            .unwrap();
        }
        s
    }

    #[test]
    fn offline_reindex_swaps_tables() {
        let mut s = snapshot_store(1000, 100);
        let costs = CostProfile::default();
        let spec = IndexSpec::new("status_idx", ["status"]);
        let r = reindex_offline(&mut s, "dpm_put_filereq", &spec, &costs).unwrap();
        assert_eq!((r.boundary_rowid, r.rows_precopied, r.rows_tailcopied), (1000, 1000, 100));
        assert!(r.verified && !r.broker_present);
        let live = s.table_id("dpm_put_filereq").unwrap();
        let names: Vec<_> = s.indices(live).unwrap().into_iter().map(|i| i.name).collect();
        assert_eq!(names, vec!["put_pfn_idx", "status_idx"]);
        assert!(s.table_id("dpm_put_filereq_old").is_ok());
        assert!(s.table_id("dpm_put_filereq_copy").is_err());
        assert!(matches!(
            reindex_offline(&mut s, "dpm_put_filereq", &spec, &costs),
            Err(MigrateError::IndexExists { .. })
        ));
    }

    #[test]
    fn offline_empty_table() {
        let mut s = snapshot_store(0, 0);
        let spec = IndexSpec::new("status_idx", ["status"]);
        let r = reindex_offline(&mut s, "dpm_put_filereq", &spec, &CostProfile::default()).unwrap();
        assert_eq!(r.stop_window, 0.0);
        assert!(r.verified);
    }

    #[test]
    fn rename_failure_leaves_original() {
        let mut s = snapshot_store(10, 2);
        let put = s.table_id("dpm_put_filereq").unwrap();
        s.register_writer(put, OwnerId(1)).unwrap();
        let spec = IndexSpec::new("status_idx", ["status"]);
        let err = reindex_offline(&mut s, "dpm_put_filereq", &spec, &CostProfile::default());
        assert!(matches!(err, Err(MigrateError::Rename(StoreError::WritersActive { .. }))));
        assert_eq!(s.table_id("dpm_put_filereq").unwrap(), put);
        assert!(s.table_id("dpm_put_filereq_copy").is_err());
        assert!(s.indices(put).unwrap().iter().all(|i| i.name != "status_idx"));
    }

    #[test]
    fn live_online_migration_confines_failures() {
        let cfg = LiveConfig {
            table_rows: 5_000,
            ..LiveConfig::default()
        };
        let run = run_live(&cfg, Method::Online).unwrap();
        let rep = run.report.clone().unwrap();
        assert!(rep.verified, "{rep:?}");
        assert!(rep.rows_tailcopied > 0 && rep.rows_tailcopied < 1000);
        assert_eq!(run.failures_outside_window("SERVICE_STOPPED"), 0);
        assert!(run.completed > 0);
        let naive = run_live(&cfg, Method::Naive).unwrap();
        assert!(naive.failures.iter().any(|f| f.code == "LOCKED"));
        assert!(run.window_len() < naive.window_len());
    }
}
