//! Disk pool servers: shared network links, filesystem space and transfers
//! that fail when they exceed their timeout.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::desengine::{DemandId, Engine, EngineError, SimTime, StationId, StationSpec};
use crate::namespace::Replica;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilesystemSpec {
    pub name: String,
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub name: String,
    /// Bytes per second.
    pub link_capacity: f64,
    pub filesystems: Vec<FilesystemSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filesystem {
    pub name: String,
    pub capacity: u64,
    pub used: u64,
    /// Space promised to in-flight puts.
    pub reserved: u64,
}

impl Filesystem {
    pub fn free(&self) -> u64 {
        self.capacity - self.used
    }

    fn available(&self) -> u64 {
        self.capacity - self.used - self.reserved
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoolServer {
    pub name: String,
    pub link_capacity: f64,
    pub filesystems: Vec<Filesystem>,
    pub link: StationId,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PoolError {
    #[error("unknown pool `{0}`")]
    UnknownPool(String),
    #[error("unknown filesystem `{pool}:{fs}`")]
    UnknownFilesystem { pool: String, fs: String },
    #[error("duplicate pool `{0}`")]
    DuplicatePool(String),
    #[error("transfer size must be positive")]
    EmptyTransfer,
    #[error("NO_SPACE: no filesystem can hold {0} bytes")]
    NoSpace(u64),
    #[error(transparent)]
    Engine(#[from] EngineError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransferId(pub u64);

/// Why a transfer event fired.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TransferSignal {
    Completed,
    TimedOut,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferOutcome {
    pub id: TransferId,
    pub ok: bool,
    pub started: SimTime,
    pub ended: SimTime,
    pub bytes: u64,
    pub pool: String,
    pub owner: u64,
}

struct InFlight {
    pool: String,
    link: StationId,
    demand: DemandId,
    started: SimTime,
    bytes: u64,
    owner: u64,
}

/// All pool servers of a site, attached to one engine.
pub struct Pools {
    servers: BTreeMap<String, PoolServer>,
    order: Vec<String>,
    in_flight: BTreeMap<TransferId, InFlight>,
    next_id: u64,
    put_cursor: usize,
}

impl Pools {
    pub fn new<E>(engine: &mut Engine<E>, specs: &[PoolSpec]) -> Result<Self, PoolError> {
        let mut servers = BTreeMap::new();
        let mut order = Vec::new();
        for spec in specs {
            if servers.contains_key(&spec.name) {
                return Err(PoolError::DuplicatePool(spec.name.clone()));
            }
            let link = engine.add_station(StationSpec::ps(
                format!("link:{}", spec.name),
                spec.link_capacity,
            ))?;
            servers.insert(
                spec.name.clone(),
                PoolServer {
                    name: spec.name.clone(),
                    link_capacity: spec.link_capacity,
                    filesystems: spec
                        .filesystems
                        .iter()
                        .map(|f| Filesystem {
                            name: f.name.clone(),
                            capacity: f.capacity,
                            used: 0,
                            reserved: 0,
                        })
                        .collect(),
                    link,
                },
            );
            order.push(spec.name.clone());
        }
        Ok(Self {
            servers,
            order,
            in_flight: BTreeMap::new(),
            next_id: 0,
            put_cursor: 0,
        })
    }

    pub fn server(&self, pool: &str) -> Result<&PoolServer, PoolError> {
        self.servers
            .get(pool)
            .ok_or_else(|| PoolError::UnknownPool(pool.to_owned()))
    }

    /// Servers in configuration order.
    pub fn servers(&self) -> impl Iterator<Item = &PoolServer> {
        self.order.iter().map(|n| &self.servers[n])
    }

    /// Every `(pool, filesystem)` pair in configuration order.
    pub fn filesystems(&self) -> Vec<Replica> {
        self.servers()
            .flat_map(|s| s.filesystems.iter().map(|f| Replica::new(&s.name, &f.name)))
            .collect()
    }

    pub fn free_space(&self, pool: &str) -> Result<BTreeMap<String, u64>, PoolError> {
        Ok(self
            .server(pool)?
            .filesystems
            .iter()
            .map(|f| (f.name.clone(), f.free()))
            .collect())
    }

    fn fs_mut(&mut self, r: &Replica) -> Result<&mut Filesystem, PoolError> {
        let s = self
            .servers
            .get_mut(&r.pool)
            .ok_or_else(|| PoolError::UnknownPool(r.pool.clone()))?;
        s.filesystems
            .iter_mut()
            .find(|f| f.name == r.fs)
            .ok_or_else(|| PoolError::UnknownFilesystem {
                pool: r.pool.clone(),
                fs: r.fs.clone(),
            })
    }

    /// Picks the next filesystem, round-robin over all filesystems, that can
    /// take `bytes` after existing reservations, and reserves the space.
    pub fn reserve(&mut self, bytes: u64) -> Result<Replica, PoolError> {
        let all = self.filesystems();
        for k in 0..all.len() {
            let i = (self.put_cursor + k) % all.len();
            let fs = self.fs_mut(&all[i])?;
            if fs.available() >= bytes {
                fs.reserved += bytes;
                self.put_cursor = i + 1;
                return Ok(all[i].clone());
            }
        }
        Err(PoolError::NoSpace(bytes))
    }

    /// Turns a reservation into used space (`ok`) or drops it.
    pub fn settle(&mut self, r: &Replica, bytes: u64, ok: bool) -> Result<(), PoolError> {
        let fs = self.fs_mut(r)?;
        fs.reserved = fs.reserved.saturating_sub(bytes);
        if ok {
            fs.used = (fs.used + bytes).min(fs.capacity);
        }
        Ok(())
    }

    /// Starts moving `bytes` over `pool`'s link. `signal` builds the event the
    /// engine delivers on completion or timeout; pass it back to
    /// [`Pools::on_signal`].
    pub fn start_transfer<E>(
        &mut self,
        engine: &mut Engine<E>,
        pool: &str,
        bytes: u64,
        timeout: f64,
        owner: u64,
        signal: impl Fn(TransferId, TransferSignal) -> E,
    ) -> Result<TransferId, PoolError> {
        if bytes == 0 {
            return Err(PoolError::EmptyTransfer);
        }
        let link = self.server(pool)?.link;
        let id = TransferId(self.next_id);
        self.next_id += 1;
        let demand = engine.submit(link, bytes as f64, owner, signal(id, TransferSignal::Completed))?;
        if timeout.is_finite() {
            engine.schedule_in(timeout, signal(id, TransferSignal::TimedOut))?;
        }
        self.in_flight.insert(
            id,
            InFlight {
                pool: pool.to_owned(),
                link,
                demand,
                started: engine.now(),
                bytes,
                owner,
            },
        );
        Ok(id)
    }

    /// Resolves a transfer event. Returns `None` for the loser of the
    /// completion/timeout race.
    pub fn on_signal<E>(
        &mut self,
        engine: &mut Engine<E>,
        id: TransferId,
        signal: TransferSignal,
    ) -> Option<TransferOutcome> {
        let f = self.in_flight.remove(&id)?;
        let ok = match signal {
            TransferSignal::Completed => true,
            TransferSignal::TimedOut => {
                engine.cancel(f.link, f.demand);
                false
            }
        };
        Some(TransferOutcome {
            id,
            ok,
            started: f.started,
            ended: engine.now(),
            bytes: f.bytes,
            pool: f.pool,
            owner: f.owner,
        })
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }
}
