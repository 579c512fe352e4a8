//! SRM-style request broker on the head node.
//!
//! Every call performs its table operations when it arrives and then walks a
//! chain of demands: service CPU (`t_gsi + t_srm`), DB CPU (scanned rows) and
//! DB disk (buffer misses plus fsyncs). The reply is delivered through
//! [`Broker::on_event`] once the last demand has been served.
//!
//! The `lifetime` column of `dpm_get_filereq` holds the absolute expiry time
//! of the pin, so the reuse probe is `pfn = P AND lifetime > now`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dbmodel::{charge_scan, charge_write, BufferPoolModel, CostProfile, DbDemand};
use crate::desengine::{Engine, EngineError, SimTime, StationId};
use crate::namespace::{Catalog, NamespaceError, Replica};
use crate::pools::{PoolError, Pools};
use crate::tablestore::{
    ColumnKind, IndexSpec, OwnerId, Predicate, Projection, RowId, ScanStats, Store, StoreError,
    TableId, TableSchema, Value, ROWID,
};

pub const REQ_TABLE: &str = "dpm_req";
pub const GET_FILEREQ_TABLE: &str = "dpm_get_filereq";
pub const PUT_FILEREQ_TABLE: &str = "dpm_put_filereq";

/// Writer identity of the broker in the table store.
pub const BROKER_OWNER: OwnerId = OwnerId(1);

pub fn req_schema() -> TableSchema {
    TableSchema::new(REQ_TABLE)
        .column("token", ColumnKind::Text)
        .column("dn", ColumnKind::Text)
        .column("kind", ColumnKind::Text)
        .column("stime", ColumnKind::Timestamp)
        .column("etime", ColumnKind::Timestamp)
        .column("status", ColumnKind::Text)
}

pub fn get_filereq_schema() -> TableSchema {
    TableSchema::new(GET_FILEREQ_TABLE)
        .column("r_rowid", ColumnKind::Integer)
        .column("pfn", ColumnKind::Text)
        .column("lifetime", ColumnKind::Timestamp)
        .column("status", ColumnKind::Text)
        .column("pool", ColumnKind::Text)
        .column("fs", ColumnKind::Text)
        .column("filesize", ColumnKind::Integer)
        .column("turl", ColumnKind::Text)
}

pub fn put_filereq_schema() -> TableSchema {
    TableSchema::new(PUT_FILEREQ_TABLE)
        .column("r_rowid", ColumnKind::Integer)
        .column("pfn", ColumnKind::Text)
        .column("status", ColumnKind::Text)
        .column("pool", ColumnKind::Text)
        .column("fs", ColumnKind::Text)
        .column("reserved", ColumnKind::Integer)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Get,
    Put,
}

impl Kind {
    pub fn as_str(self) -> &'static str {
        match self {
            Kind::Get => "get",
            Kind::Put => "put",
        }
    }

    fn filereq_table(self) -> &'static str {
        match self {
            Kind::Get => GET_FILEREQ_TABLE,
            Kind::Put => PUT_FILEREQ_TABLE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Status {
    Pending,
    Ready,
    Running,
    Done,
    Failed,
}

impl Status {
    pub fn as_str(self) -> &'static str {
        match self {
            Status::Pending => "PENDING",
            Status::Ready => "READY",
            Status::Running => "RUNNING",
            Status::Done => "DONE",
            Status::Failed => "FAILED",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "PENDING" => Status::Pending,
            "READY" => Status::Ready,
            "RUNNING" => Status::Running,
            "DONE" => Status::Done,
            "FAILED" => Status::Failed,
            _ => return None,
        })
    }

    pub fn is_terminal(self) -> bool {
        matches!(self, Status::Done | Status::Failed)
    }

    pub fn can_become(self, to: Status) -> bool {
        use Status::*;
        matches!(
            (self, to),
            (Pending, Ready)
                | (Pending, Failed)
                | (Ready, Running)
                | (Ready, Failed)
                | (Running, Done)
                | (Running, Failed)
        )
    }

    fn holds_pool(self) -> bool {
        matches!(self, Status::Ready | Status::Running | Status::Done)
    }
}

impl fmt::Display for Status {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Token(pub u64);

impl fmt::Display for Token {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "srm-{:08x}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BrokerError {
    #[error("SERVICE_STOPPED: {} requests are paused", .0.as_str())]
    ServiceStopped(Kind),
    #[error("NO_SPACE: no filesystem can hold {0} bytes")]
    NoSpace(u64),
    #[error("UNKNOWN_TOKEN: {0}")]
    UnknownToken(Token),
    #[error("ILLEGAL_TRANSITION: {from} -> {to}")]
    IllegalTransition { from: Status, to: Status },
    #[error("NOT_FOUND: {0}")]
    NotFound(String),
    #[error("table `{0}` is locked")]
    Locked(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Pool(PoolError),
    #[error(transparent)]
    Namespace(NamespaceError),
}

impl BrokerError {
    pub fn code(&self) -> &'static str {
        match self {
            BrokerError::ServiceStopped(_) => "SERVICE_STOPPED",
            BrokerError::NoSpace(_) => "NO_SPACE",
            BrokerError::UnknownToken(_) => "UNKNOWN_TOKEN",
            BrokerError::IllegalTransition { .. } => "ILLEGAL_TRANSITION",
            BrokerError::NotFound(_) => "NOT_FOUND",
            BrokerError::Locked(_) => "LOCKED",
            _ => "INTERNAL",
        }
    }
}

/// Stations a broker charges. In a combined head node `svc_cpu == db_cpu`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrokerStations {
    pub svc_cpu: StationId,
    pub db_cpu: StationId,
    pub db_disk: StationId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CallId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrokerEvent {
    Step(CallId),
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Token(Token),
    Status(Status),
    Released,
    Charged,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CallDone {
    pub call: CallId,
    pub owner: u64,
    pub reply: Result<Reply, BrokerError>,
}

struct Call {
    owner: u64,
    steps: Vec<(StationId, f64)>,
    next: usize,
    reply: Result<Reply, BrokerError>,
}

#[derive(Debug, Clone)]
struct TokenEntry {
    kind: Kind,
    req: RowId,
    file: RowId,
    status: Status,
    replica: Option<Replica>,
    bytes: u64,
    pfn: String,
    gid: i64,
}

/// One observed status change of a request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transition {
    pub token: Token,
    pub from: Status,
    pub to: Status,
}

/// Cumulative accounting over a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BrokerCounters {
    pub calls: u64,
    pub stopped: u64,
    pub rows_scanned: u64,
    pub disk_reads: f64,
    pub fsyncs: u64,
    pub svc_cpu_seconds: f64,
    pub db_cpu_seconds: f64,
    pub db_disk_seconds: f64,
}

pub struct Broker {
    pub store: Store,
    pub catalog: Catalog,
    costs: CostProfile,
    buffer: BufferPoolModel,
    stations: BrokerStations,
    tokens: HashMap<Token, TokenEntry>,
    next_token: u64,
    rotation: u64,
    paused: BTreeSet<Kind>,
    calls: BTreeMap<CallId, Call>,
    next_call: u64,
    counters: BrokerCounters,
    transitions: Vec<Transition>,
}

/// Work done by one call before its demands are charged.
#[derive(Default)]
struct Ledger {
    db: DbDemand,
    rows: u64,
}

impl Ledger {
    fn scan(&mut self, stats: &ScanStats, buffer: &BufferPoolModel, costs: &CostProfile) {
        self.rows += stats.rows_scanned;
        self.db += charge_scan(stats, buffer, costs);
    }

    fn write(&mut self, costs: &CostProfile) {
        self.db += charge_write(costs);
    }
}

impl Broker {
    /// Creates the request tables (with DPM's stock indices) next to an
    /// existing catalog in `store`.
    pub fn new(
        mut store: Store,
        catalog: Catalog,
        costs: CostProfile,
        buffer: BufferPoolModel,
        stations: BrokerStations,
    ) -> Result<Self, BrokerError> {
        for schema in [req_schema(), get_filereq_schema(), put_filereq_schema()] {
            if store.table_id(&schema.name).is_err() {
                let name = schema.name.clone();
                let id = store.create_table(schema)?;
                match name.as_str() {
                    REQ_TABLE => store.add_index(id, IndexSpec::new("token_idx", ["token"]))?,
                    GET_FILEREQ_TABLE => store.add_index(id, IndexSpec::new("pfn_idx", ["pfn"]))?,
                    _ => store.add_index(id, IndexSpec::new("put_pfn_idx", ["pfn"]))?,
                }
            }
        }
        let mut b = Self {
            store,
            catalog,
            costs,
            buffer,
            stations,
            tokens: HashMap::new(),
            next_token: 1,
            rotation: 0,
            paused: BTreeSet::new(),
            calls: BTreeMap::new(),
            next_call: 0,
            counters: BrokerCounters::default(),
            transitions: Vec::new(),
        };
        for kind in [Kind::Get, Kind::Put] {
            b.register(kind)?;
        }
        Ok(b)
    }

    pub fn costs(&self) -> &CostProfile {
        &self.costs
    }

    pub fn buffer(&self) -> &BufferPoolModel {
        &self.buffer
    }

    pub fn stations(&self) -> BrokerStations {
        self.stations
    }

    pub fn counters(&self) -> &BrokerCounters {
        &self.counters
    }

    pub fn transitions(&self) -> &[Transition] {
        &self.transitions
    }

    pub fn table(&self, name: &str) -> Result<TableId, BrokerError> {
        Ok(self.store.table_id(name)?)
    }

    pub fn is_paused(&self, kind: Kind) -> bool {
        self.paused.contains(&kind)
    }

    fn register(&mut self, kind: Kind) -> Result<(), BrokerError> {
        for name in [REQ_TABLE, kind.filereq_table()] {
            let id = self.store.table_id(name)?;
            self.store.register_writer(id, BROKER_OWNER)?;
        }
        Ok(())
    }

    /// Stops accepting `kind` requests and drops the broker's writer
    /// registrations that no running kind still needs.
    pub fn pause(&mut self, kind: Kind) -> Result<(), BrokerError> {
        self.paused.insert(kind);
        let id = self.store.table_id(kind.filereq_table())?;
        self.store.unregister_writer(id, BROKER_OWNER)?;
        if self.paused.len() == 2 {
            let id = self.store.table_id(REQ_TABLE)?;
            self.store.unregister_writer(id, BROKER_OWNER)?;
        }
        Ok(())
    }

    pub fn resume(&mut self, kind: Kind) -> Result<(), BrokerError> {
        self.paused.remove(&kind);
        self.register(kind)
    }

    pub fn pause_all(&mut self) -> Result<(), BrokerError> {
        self.pause(Kind::Get)?;
        self.pause(Kind::Put)
    }

    pub fn resume_all(&mut self) -> Result<(), BrokerError> {
        self.resume(Kind::Get)?;
        self.resume(Kind::Put)
    }

    /// Round-robin over `replicas` driven by a broker-wide counter.
    pub fn select_pool(&mut self, replicas: &[Replica]) -> Replica {
        let r = replicas[(self.rotation % replicas.len() as u64) as usize].clone();
        self.rotation += 1;
        r
    }

    fn check_unlocked(&self, kind: Kind) -> Result<(), BrokerError> {
        for name in [REQ_TABLE, kind.filereq_table()] {
            let id = self.store.table_id(name)?;
            if let Some(l) = self.store.lock(id)? {
                if l.holder != BROKER_OWNER {
                    return Err(BrokerError::Locked(name.to_owned()));
                }
            }
        }
        Ok(())
    }

    fn admit(&mut self, kind: Kind) -> Result<(), BrokerError> {
        if self.paused.contains(&kind) {
            self.counters.stopped += 1;
            return Err(BrokerError::ServiceStopped(kind));
        }
        Ok(())
    }

    fn entry(&self, token: Token) -> Result<&TokenEntry, BrokerError> {
        self.tokens.get(&token).ok_or(BrokerError::UnknownToken(token))
    }

    fn set_status(
        &mut self,
        token: Token,
        to: Status,
        now: SimTime,
        extra: &[(&str, Value)],
        led: &mut Ledger,
    ) -> Result<(), BrokerError> {
        let e = self.entry(token)?.clone();
        if !e.status.can_become(to) {
            return Err(BrokerError::IllegalTransition { from: e.status, to });
        }
        let file_table = self.store.table_id(e.kind.filereq_table())?;
        let mut assign: Vec<(&str, Value)> = vec![("status", to.as_str().into())];
        if !to.holds_pool() {
            assign.push(("pool", Value::Null));
        }
        assign.extend(extra.iter().cloned());
        let (_, stats) = self.store.update(
            file_table,
            BROKER_OWNER,
            &Predicate::all().eq(ROWID, e.file as i64),
            &assign,
        )?;
        led.scan(&stats, &self.buffer, &self.costs);
        let req_table = self.store.table_id(REQ_TABLE)?;
        let mut req_assign: Vec<(&str, Value)> = vec![("status", to.as_str().into())];
        if to.is_terminal() {
            req_assign.push(("etime", now.into()));
        }
        let (_, stats) = self.store.update(
            req_table,
            BROKER_OWNER,
            &Predicate::all().eq(ROWID, e.req as i64),
            &req_assign,
        )?;
        led.scan(&stats, &self.buffer, &self.costs);
        led.write(&self.costs);
        self.tokens.get_mut(&token).expect("checked").status = to;
        self.transitions.push(Transition {
            token,
            from: e.status,
            to,
        });
        Ok(())
    }

    fn insert_request(
        &mut self,
        kind: Kind,
        dn: &str,
        now: SimTime,
        file_row: impl FnOnce(RowId) -> Vec<Value>,
        led: &mut Ledger,
    ) -> Result<(Token, RowId, RowId), BrokerError> {
        let token = Token(self.next_token);
        self.next_token += 1;
        let req_table = self.store.table_id(REQ_TABLE)?;
        let req = self.store.insert(
            req_table,
            BROKER_OWNER,
            vec![
                token.to_string().into(),
                dn.into(),
                kind.as_str().into(),
                now.into(),
                Value::Null,
                Status::Pending.as_str().into(),
            ],
        )?;
        let file_table = self.store.table_id(kind.filereq_table())?;
        let file = self.store.insert(file_table, BROKER_OWNER, file_row(req))?;
        led.write(&self.costs);
        Ok((token, req, file))
    }

    fn launch<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        owner: u64,
        svc: f64,
        led: Ledger,
        reply: Result<Reply, BrokerError>,
    ) -> Result<CallId, BrokerError> {
        let id = CallId(self.next_call);
        self.next_call += 1;
        let c = &mut self.counters;
        c.calls += 1;
        c.rows_scanned += led.rows;
        c.disk_reads += led.db.reads;
        c.fsyncs += led.db.fsyncs;
        c.svc_cpu_seconds += svc;
        c.db_cpu_seconds += led.db.cpu;
        c.db_disk_seconds += led.db.disk;
        let steps: Vec<(StationId, f64)> = [
            (self.stations.svc_cpu, svc),
            (self.stations.db_cpu, led.db.cpu),
            (self.stations.db_disk, led.db.disk),
        ]
        .into_iter()
        .filter(|(_, d)| *d > 0.0)
        .collect();
        if let Some(&(station, size)) = steps.first() {
            engine.submit(station, size, owner, BrokerEvent::Step(id).into())?;
        } else {
            engine.schedule(engine.now(), BrokerEvent::Step(id).into())?;
        }
        self.calls.insert(
            id,
            Call {
                owner,
                steps,
                next: 0,
                reply,
            },
        );
        Ok(id)
    }

    /// Advances a call's demand chain; returns the reply when it is complete.
    pub fn on_event<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        ev: BrokerEvent,
    ) -> Option<CallDone> {
        let BrokerEvent::Step(id) = ev;
        let call = self.calls.get_mut(&id)?;
        call.next += 1;
        if let Some(&(station, size)) = call.steps.get(call.next) {
            let owner = call.owner;
            engine
                .submit(station, size, owner, BrokerEvent::Step(id).into())
                .expect("broker stations exist");
            return None;
        }
        let call = self.calls.remove(&id)?;
        Some(CallDone {
            call: id,
            owner: call.owner,
            reply: call.reply,
        })
    }

    fn svc_cost(&self) -> f64 {
        self.costs.t_gsi + self.costs.t_srm
    }

    pub fn submit_get<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        owner: u64,
        dn: &str,
        pfn: &str,
        lifetime: f64,
    ) -> Result<CallId, BrokerError> {
        self.admit(Kind::Get)?;
        let svc = self.svc_cost();
        let mut led = Ledger::default();
        let reply = self.get_ops(engine.now(), dn, pfn, lifetime, &mut led);
        self.launch(engine, owner, svc, led, reply)
    }

    fn get_ops(
        &mut self,
        now: SimTime,
        dn: &str,
        pfn: &str,
        lifetime: f64,
        led: &mut Ledger,
    ) -> Result<Reply, BrokerError> {
        self.check_unlocked(Kind::Get)?;
        let expiry = now + lifetime.max(f64::MIN_POSITIVE);
        let (token, req, file) = self.insert_request(
            Kind::Get,
            dn,
            now,
            |req| {
                vec![
                    (req as i64).into(),
                    pfn.into(),
                    expiry.into(),
                    Status::Pending.as_str().into(),
                    Value::Null,
                    Value::Null,
                    0.into(),
                    Value::Null,
                ]
            },
            led,
        )?;
        self.tokens.insert(
            token,
            TokenEntry {
                kind: Kind::Get,
                req,
                file,
                status: Status::Pending,
                replica: None,
                bytes: 0,
                pfn: pfn.to_owned(),
                gid: 0,
            },
        );
        let meta = match self.catalog.lookup(&self.store, pfn) {
            Ok((meta, stats)) => {
                led.scan(&stats, &self.buffer, &self.costs);
                meta
            }
            Err(NamespaceError::NotFound(_)) => {
                // the failed lookup still costs an index probe
                led.rows += 1;
                self.set_status(token, Status::Failed, now, &[], led)?;
                return Err(BrokerError::NotFound(pfn.to_owned()));
            }
            Err(e) => return Err(BrokerError::Namespace(e)),
        };
        let get_table = self.store.table_id(GET_FILEREQ_TABLE)?;
        let probe = self.store.select(
            get_table,
            &Predicate::all().eq("pfn", pfn).gt("lifetime", now),
            &Projection::All,
        )?;
        led.scan(&probe.stats, &self.buffer, &self.costs);
        let replica = self.select_pool(&meta.replicas);
        let turl = format!("gsiftp://{}/{}{}", replica.pool, replica.fs, pfn);
        self.set_status(
            token,
            Status::Ready,
            now,
            &[
                ("pool", replica.pool.as_str().into()),
                ("fs", replica.fs.as_str().into()),
                ("filesize", meta.filesize.into()),
                ("turl", turl.into()),
            ],
            led,
        )?;
        let e = self.tokens.get_mut(&token).expect("inserted");
        e.replica = Some(replica);
        e.bytes = meta.filesize.max(0) as u64;
        e.gid = meta.gid;
        Ok(Reply::Token(token))
    }

    pub fn submit_put<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        pools: &mut Pools,
        owner: u64,
        dn: &str,
        pfn: &str,
        size: u64,
    ) -> Result<CallId, BrokerError> {
        self.admit(Kind::Put)?;
        let svc = self.svc_cost();
        let mut led = Ledger::default();
        let reply = self.put_ops(engine.now(), pools, dn, pfn, size, &mut led);
        self.launch(engine, owner, svc, led, reply)
    }

    fn put_ops(
        &mut self,
        now: SimTime,
        pools: &mut Pools,
        dn: &str,
        pfn: &str,
        size: u64,
        led: &mut Ledger,
    ) -> Result<Reply, BrokerError> {
        self.check_unlocked(Kind::Put)?;
        let (token, req, file) = self.insert_request(
            Kind::Put,
            dn,
            now,
            |req| {
                vec![
                    (req as i64).into(),
                    pfn.into(),
                    Status::Pending.as_str().into(),
                    Value::Null,
                    Value::Null,
                    (size as i64).into(),
                ]
            },
            led,
        )?;
        self.tokens.insert(
            token,
            TokenEntry {
                kind: Kind::Put,
                req,
                file,
                status: Status::Pending,
                replica: None,
                bytes: size,
                pfn: pfn.to_owned(),
                gid: 0,
            },
        );
        let replica = match pools.reserve(size) {
            Ok(r) => r,
            Err(PoolError::NoSpace(n)) => {
                self.set_status(token, Status::Failed, now, &[], led)?;
                return Err(BrokerError::NoSpace(n));
            }
            Err(e) => return Err(BrokerError::Pool(e)),
        };
        self.set_status(
            token,
            Status::Ready,
            now,
            &[
                ("pool", replica.pool.as_str().into()),
                ("fs", replica.fs.as_str().into()),
            ],
            led,
        )?;
        self.tokens.get_mut(&token).expect("inserted").replica = Some(replica);
        Ok(Reply::Token(token))
    }

    pub fn poll<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        owner: u64,
        token: Token,
    ) -> Result<CallId, BrokerError> {
        let kind = self.entry(token)?.kind;
        self.admit(kind)?;
        let mut led = Ledger::default();
        let req_table = self.store.table_id(REQ_TABLE)?;
        let sel = self.store.select(
            req_table,
            &Predicate::all().eq("token", token.to_string()),
            &Projection::columns(["status"]),
        )?;
        led.scan(&sel.stats, &self.buffer, &self.costs);
        let status = sel
            .rows
            .first()
            .and_then(|(_, r)| r[0].as_text().and_then(Status::parse))
            .ok_or(BrokerError::UnknownToken(token))?;
        let svc = self.svc_cost();
        self.launch(engine, owner, svc, led, Ok(Reply::Status(status)))
    }

    /// The disk server reports the start of the transfer: READY -> RUNNING.
    /// Internal to the site, so no authentication cost.
    pub fn mark_running<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        owner: u64,
        token: Token,
    ) -> Result<CallId, BrokerError> {
        let kind = self.entry(token)?.kind;
        self.admit(kind)?;
        self.check_unlocked(kind)?;
        let mut led = Ledger::default();
        self.set_status(token, Status::Running, engine.now(), &[], &mut led)?;
        self.launch(engine, owner, 0.0, led, Ok(Reply::Released))
    }

    pub fn release<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        pools: &mut Pools,
        owner: u64,
        token: Token,
        outcome: Outcome,
    ) -> Result<CallId, BrokerError> {
        let e = self.entry(token)?.clone();
        self.admit(e.kind)?;
        self.check_unlocked(e.kind)?;
        let now = engine.now();
        let mut led = Ledger::default();
        let to = match outcome {
            Outcome::Done => Status::Done,
            Outcome::Failed => Status::Failed,
        };
        if e.status == Status::Ready && to == Status::Done {
            return Err(BrokerError::IllegalTransition { from: e.status, to });
        }
        self.set_status(token, to, now, &[], &mut led)?;
        if e.kind == Kind::Put {
            if let Some(r) = &e.replica {
                pools.settle(r, e.bytes, to == Status::Done).map_err(BrokerError::Pool)?;
                if to == Status::Done {
                    match self.catalog.register_file(
                        &mut self.store,
                        &e.pfn,
                        e.gid,
                        e.bytes as i64,
                        std::slice::from_ref(r),
                    ) {
                        Ok(_) => led.write(&self.costs),
                        Err(err) => return Err(BrokerError::Namespace(err)),
                    }
                }
            }
        }
        let svc = self.svc_cost();
        self.launch(engine, owner, svc, led, Ok(Reply::Released))
    }

    /// Charges DB work not tied to an SRM call (monitors, migration copies).
    pub fn charge_db<E: From<BrokerEvent>>(
        &mut self,
        engine: &mut Engine<E>,
        owner: u64,
        scans: &[ScanStats],
        extra_rows: u64,
    ) -> Result<CallId, BrokerError> {
        let mut led = Ledger::default();
        for s in scans {
            led.scan(s, &self.buffer, &self.costs);
        }
        led.rows += extra_rows;
        led.db.cpu += extra_rows as f64 * self.costs.t_row;
        self.launch(engine, owner, 0.0, led, Ok(Reply::Charged))
    }

    /// `(pool, filesystem, bytes)` a READY/RUNNING token refers to.
    pub fn transfer_target(&self, token: Token) -> Result<(Replica, u64), BrokerError> {
        let e = self.entry(token)?;
        let r = e.replica.clone().ok_or(BrokerError::IllegalTransition {
            from: e.status,
            to: Status::Running,
        })?;
        Ok((r, e.bytes))
    }

    pub fn status(&self, token: Token) -> Result<Status, BrokerError> {
        Ok(self.entry(token)?.status)
    }

    pub fn token_rows(&self, token: Token) -> Result<(RowId, RowId), BrokerError> {
        let e = self.entry(token)?;
        Ok((e.req, e.file))
    }

    pub fn tokens(&self) -> usize {
        self.tokens.len()
    }

    /// Pre-populates the request tables with terminal history, without
    /// charging any cost: `get_rows` get requests spread over `pfns` and
    /// `put_rows` put requests, all finished before t = 0.
    pub fn seed_history(
        &mut self,
        get_rows: u64,
        put_rows: u64,
        pfns: &[String],
        seed: u64,
    ) -> Result<(), BrokerError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6869_7374);
        let req_table = self.store.table_id(REQ_TABLE)?;
        let get_table = self.store.table_id(GET_FILEREQ_TABLE)?;
        let put_table = self.store.table_id(PUT_FILEREQ_TABLE)?;
        let total = get_rows + put_rows;
        for i in 0..total {
            let kind = if i < get_rows { Kind::Get } else { Kind::Put };
            let token = Token(self.next_token);
            self.next_token += 1;
            let stime = -((total - i) as f64) - 1.0;
            let status = if rng.gen_bool(0.97) { Status::Done } else { Status::Failed };
            let req = self.store.insert(
                req_table,
                BROKER_OWNER,
                vec![
                    token.to_string().into(),
                    "/DC=org/CN=history".into(),
                    kind.as_str().into(),
                    stime.into(),
                    (stime + 1.0).into(),
                    status.as_str().into(),
                ],
            )?;
            let pfn: Value = if pfns.is_empty() {
                format!("/dpm/site/history/{i}").into()
            } else {
                pfns[rng.gen_range(0..pfns.len())].as_str().into()
            };
            let pool: Value = if status == Status::Done {
                "pool00".into()
            } else {
                Value::Null
            };
            match kind {
                Kind::Get => self.store.insert(
                    get_table,
                    BROKER_OWNER,
                    vec![
                        (req as i64).into(),
                        pfn,
                        stime.into(),
                        status.as_str().into(),
                        pool,
                        "fs1".into(),
                        0.into(),
                        Value::Null,
                    ],
                )?,
                Kind::Put => self.store.insert(
                    put_table,
                    BROKER_OWNER,
                    vec![
                        (req as i64).into(),
                        pfn,
                        status.as_str().into(),
                        pool,
                        "fs1".into(),
                        0.into(),
                    ],
                )?,
            };
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::desengine::StationSpec;
    use crate::pools::{FilesystemSpec, PoolSpec};

    #[derive(Debug, Clone, Copy, PartialEq)]
    enum Ev {
        B(BrokerEvent),
    }

    impl From<BrokerEvent> for Ev {
        fn from(e: BrokerEvent) -> Self {
            Ev::B(e)
        }
    }

    struct Rig {
        engine: Engine<Ev>,
        broker: Broker,
        pools: Pools,
    }

    fn rig(n_pools: usize, fs_capacity: u64) -> Rig {
        let mut engine = Engine::new();
        let cpu = engine.add_station(StationSpec::cpu("head-cpu", 2)).unwrap();
        let disk = engine.add_station(StationSpec::fcfs("head-disk", 1.0)).unwrap();
        let specs: Vec<PoolSpec> = (0..n_pools)
            .map(|i| PoolSpec {
                name: format!("pool{i:02}"),
                link_capacity: 125e6,
                filesystems: vec![FilesystemSpec {
                    name: "fs1".into(),
                    capacity: fs_capacity,
                }],
            })
            .collect();
        let pools = Pools::new(&mut engine, &specs).unwrap();
        let mut store = Store::new();
        let catalog = Catalog::create(&mut store).unwrap();
        let broker = Broker::new(
            store,
            catalog,
            CostProfile::default(),
            BufferPoolModel::default(),
            BrokerStations {
                svc_cpu: cpu,
                db_cpu: cpu,
                db_disk: disk,
            },
        )
        .unwrap();
        Rig {
            engine,
            broker,
            pools,
        }
    }

    impl Rig {
        fn register(&mut self, pfn: &str, pools: &[usize]) {
            let reps: Vec<Replica> = pools
                .iter()
                .map(|i| Replica::new(format!("pool{i:02}"), "fs1"))
                .collect();
            self.broker
                .catalog
                .register_file(&mut self.broker.store, pfn, 1, 1000, &reps)
                .unwrap();
        }

        fn wait(&mut self) -> CallDone {
            while let Some((_, Ev::B(e))) = self.engine.next() {
                if let Some(done) = self.broker.on_event(&mut self.engine, e) {
                    return done;
                }
            }
            panic!("call never completed");
        }

        fn get(&mut self, pfn: &str) -> Result<Token, BrokerError> {
            self.broker.submit_get(&mut self.engine, 1, "/CN=u", pfn, 600.0)?;
            match self.wait().reply? {
                Reply::Token(t) => Ok(t),
                r => panic!("unexpected {r:?}"),
            }
        }

        fn put(&mut self, pfn: &str, size: u64) -> Result<Token, BrokerError> {
            self.broker
                .submit_put(&mut self.engine, &mut self.pools, 1, "/CN=u", pfn, size)?;
            match self.wait().reply? {
                Reply::Token(t) => Ok(t),
                r => panic!("unexpected {r:?}"),
            }
        }

        fn poll(&mut self, t: Token) -> Result<Status, BrokerError> {
            self.broker.poll(&mut self.engine, 1, t)?;
            match self.wait().reply? {
                Reply::Status(s) => Ok(s),
                r => panic!("unexpected {r:?}"),
            }
        }

        fn run(&mut self, t: Token) {
            self.broker.mark_running(&mut self.engine, 1, t).unwrap();
            self.wait().reply.unwrap();
        }

        fn release(&mut self, t: Token, o: Outcome) -> Result<(), BrokerError> {
            self.broker
                .release(&mut self.engine, &mut self.pools, 1, t, o)?;
            self.wait().reply.map(|_| ())
        }
    }

    #[test]
    fn get_on_idle_system_is_ready_on_a_replica() {
        let mut r = rig(3, 1 << 40);
        r.register("/a", &[0, 2]);
        let t = r.get("/a").unwrap();
        assert_eq!(r.poll(t).unwrap(), Status::Ready);
        let (rep, bytes) = r.broker.transfer_target(t).unwrap();
        assert!(rep.pool == "pool00" || rep.pool == "pool02");
        assert_eq!(bytes, 1000);
        // t_gsi + t_srm on the head CPU, then DB work
        assert!(r.engine.now() > 0.025);
    }

    #[test]
    fn unknown_pfn_fails_request() {
        let mut r = rig(1, 1 << 40);
        assert_eq!(r.get("/missing"), Err(BrokerError::NotFound("/missing".into())));
        let tr = r.broker.transitions();
        assert_eq!(tr.len(), 1);
        assert_eq!((tr[0].from, tr[0].to), (Status::Pending, Status::Failed));
    }

    #[test]
    fn release_lifecycle() {
        let mut r = rig(1, 1 << 40);
        r.register("/a", &[0]);
        let t = r.get("/a").unwrap();
        assert_eq!(
            r.release(t, Outcome::Done),
            Err(BrokerError::IllegalTransition {
                from: Status::Ready,
                to: Status::Done
            })
        );
        r.run(t);
        r.release(t, Outcome::Done).unwrap();
        assert_eq!(r.poll(t).unwrap(), Status::Done);
        assert!(matches!(
            r.release(t, Outcome::Done),
            Err(BrokerError::IllegalTransition { .. })
        ));
        let req = r.broker.table(REQ_TABLE).unwrap();
        let row = r.broker.store.get(req, 1).unwrap().unwrap().clone();
        assert!(row[4].as_time().unwrap() >= row[3].as_time().unwrap());
        assert_eq!(r.poll(Token(999)), Err(BrokerError::UnknownToken(Token(999))));
    }

    #[test]
    fn submits_and_releases_fill_table_with_terminal_rows() {
        let mut r = rig(2, 1 << 40);
        r.register("/a", &[0, 1]);
        let n = 25;
        for _ in 0..n {
            let t = r.get("/a").unwrap();
            r.run(t);
            r.release(t, Outcome::Done).unwrap();
        }
        let req = r.broker.table(REQ_TABLE).unwrap();
        let rows: Vec<_> = r.broker.store.rows(req).unwrap().collect();
        assert_eq!(rows.len(), n);
        assert!(rows.iter().all(|(_, row)| row[5] == Value::from("DONE")));
        let get = r.broker.table(GET_FILEREQ_TABLE).unwrap();
        assert_eq!(r.broker.store.len(get).unwrap(), n);
        // pool rotation alternated between the two replicas
        let pools: Vec<_> = r.broker.store.rows(get).unwrap().map(|(_, row)| row[4].clone()).collect();
        assert_eq!(pools[0], Value::from("pool00"));
        assert_eq!(pools[1], Value::from("pool01"));
        for tr in r.broker.transitions() {
            assert!(tr.from.can_become(tr.to));
        }
    }

    #[test]
    fn select_pool_rotation() {
        let mut r = rig(18, 1 << 40);
        let one = vec![Replica::new("p", "f")];
        assert_eq!(r.broker.select_pool(&one), one[0]);
        let two = vec![Replica::new("a", "f"), Replica::new("b", "f")];
        let x = r.broker.select_pool(&two);
        let y = r.broker.select_pool(&two);
        assert_ne!(x, y);
        let all: Vec<Replica> = (0..18).map(|i| Replica::new(format!("pool{i:02}"), "fs1")).collect();
        let mut counts = BTreeMap::new();
        for _ in 0..1000 {
            *counts.entry(r.broker.select_pool(&all).pool).or_insert(0) += 1;
        }
        let mean = 1000.0 / 18.0;
        assert_eq!(counts.len(), 18);
        assert!(counts.values().all(|c| (f64::from(*c) - mean).abs() <= 1.0));
    }

    #[test]
    fn put_registers_file() {
        let mut r = rig(1, 1 << 40);
        let t = r.put("/out", 500).unwrap();
        r.run(t);
        r.release(t, Outcome::Done).unwrap();
        let (meta, _) = r.broker.catalog.lookup(&r.broker.store, "/out").unwrap();
        assert_eq!(meta.replicas, vec![Replica::new("pool00", "fs1")]);
        assert_eq!(r.pools.free_space("pool00").unwrap()["fs1"], (1 << 40) - 500);
    }

    #[test]
    fn third_put_on_two_file_filesystem_is_no_space() {
        let mut r = rig(1, 1000);
        for i in 0..2 {
            let t = r.put(&format!("/o{i}"), 500).unwrap();
            r.run(t);
            r.release(t, Outcome::Done).unwrap();
        }
        assert_eq!(r.put("/o2", 500), Err(BrokerError::NoSpace(500)));
        let put = r.broker.table(PUT_FILEREQ_TABLE).unwrap();
        let last = r.broker.store.get(put, 3).unwrap().unwrap();
        assert_eq!(last[2], Value::from("FAILED"));
        assert_eq!(last[3], Value::Null);
    }

    #[test]
    fn pause_is_per_kind() {
        let mut r = rig(1, 1 << 40);
        r.register("/a", &[0]);
        r.broker.pause(Kind::Put).unwrap();
        assert_eq!(r.put("/o", 1), Err(BrokerError::ServiceStopped(Kind::Put)));
        assert!(r.get("/a").is_ok());
        let put = r.broker.table(PUT_FILEREQ_TABLE).unwrap();
        assert!(r.broker.store.writers(put).unwrap().is_empty());
        let req = r.broker.table(REQ_TABLE).unwrap();
        assert!(!r.broker.store.writers(req).unwrap().is_empty());
        r.broker.resume(Kind::Put).unwrap();
        assert!(r.put("/o", 1).is_ok());
    }

    #[test]
    fn pause_resume_leaves_no_pending_rows() {
        let mut r = rig(1, 1 << 40);
        r.register("/a", &[0]);
        let mut tokens = Vec::new();
        for i in 0..10 {
            if i == 4 {
                r.broker.pause_all().unwrap();
            }
            if i == 7 {
                r.broker.resume_all().unwrap();
            }
            if let Ok(t) = r.get("/a") {
                tokens.push(t);
            }
        }
        assert_eq!(tokens.len(), 7);
        assert_eq!(r.broker.counters().stopped, 3);
        for tb in [REQ_TABLE, GET_FILEREQ_TABLE] {
            let id = r.broker.table(tb).unwrap();
            let pending = r
                .broker
                .store
                .select(id, &Predicate::all().eq("status", "PENDING"), &Projection::All)
                .unwrap();
            assert!(pending.rows.is_empty());
        }
    }

    #[test]
    fn composite_index_scans_fewer_rows_for_the_same_workload() {
        let run = |composite: bool| {
            let mut r = rig(2, 1 << 40);
            let pfns: Vec<String> = (0..10).map(|i| format!("/d/{i}")).collect();
            for p in &pfns {
                r.register(p, &[0, 1]);
            }
            r.broker.seed_history(2000, 0, &pfns, 1).unwrap();
            if composite {
                let id = r.broker.table(GET_FILEREQ_TABLE).unwrap();
                r.broker
                    .store
                    .add_index(id, IndexSpec::new("pfn_lifetime", ["pfn", "lifetime"]))
                    .unwrap();
            }
            for p in pfns.iter().cycle().take(40) {
                let t = r.get(p).unwrap();
                r.run(t);
                r.release(t, Outcome::Done).unwrap();
            }
            r.broker.counters().rows_scanned
        };
        let (plain, comp) = (run(false), run(true));
        assert!(comp < plain, "{comp} !< {plain}");
    }

    #[test]
    fn locked_table_fails_requests() {
        let mut r = rig(1, 1 << 40);
        r.register("/a", &[0]);
        let id = r.broker.table(GET_FILEREQ_TABLE).unwrap();
        r.broker.store.lock_table(id, OwnerId(77), 0.0).unwrap();
        assert_eq!(r.get("/a"), Err(BrokerError::Locked(GET_FILEREQ_TABLE.into())));
        let req = r.broker.table(REQ_TABLE).unwrap();
        assert_eq!(r.broker.store.len(req).unwrap(), 0);
    }
}
