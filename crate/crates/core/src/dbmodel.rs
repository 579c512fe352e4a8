//! Database resource model: buffer-pool hit rate, scan/write cost
//! translation and the background monitoring agents.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{PUT_FILEREQ_TABLE, REQ_TABLE};
use crate::namespace::Catalog;
use crate::tablestore::{Predicate, Projection, ScanStats, Store, StoreError};

pub const MIB: u64 = 1 << 20;
pub const GIB: u64 = 1 << 30;

/// Per-operation service costs, in seconds of the station they land on.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostProfile {
    /// Head-CPU seconds per request for GSI authentication.
    pub t_gsi: f64,
    /// Head-CPU seconds per request for SRM protocol handling.
    pub t_srm: f64,
    /// DB-CPU seconds per scanned row.
    pub t_row: f64,
    /// DB-disk seconds per buffer-miss read.
    pub t_disk: f64,
    /// DB-disk seconds per write transaction.
    pub t_fsync: f64,
}

impl Default for CostProfile {
    fn default() -> Self {
        Self {
            t_gsi: 0.015,
            t_srm: 0.010,
            t_row: 2e-6,
            t_disk: 0.006,
            t_fsync: 0.003,
        }
    }
}

impl CostProfile {
    pub fn validate(&self) -> Result<(), DbModelError> {
        let fields = [
            ("t_gsi", self.t_gsi),
            ("t_srm", self.t_srm),
            ("t_row", self.t_row),
            ("t_disk", self.t_disk),
            ("t_fsync", self.t_fsync),
        ];
        for (name, v) in fields {
            if !(v.is_finite() && v >= 0.0) {
                return Err(DbModelError::BadCost(name));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        Some(match name {
            "t_gsi" => self.t_gsi,
            "t_srm" => self.t_srm,
            "t_row" => self.t_row,
            "t_disk" => self.t_disk,
            "t_fsync" => self.t_fsync,
            _ => return None,
        })
    }

    pub fn set(&mut self, name: &str, v: f64) -> bool {
        let slot = match name {
            "t_gsi" => &mut self.t_gsi,
            "t_srm" => &mut self.t_srm,
            "t_row" => &mut self.t_row,
            "t_disk" => &mut self.t_disk,
            "t_fsync" => &mut self.t_fsync,
            _ => return false,
        };
        *slot = v;
        true
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DbModelError {
    #[error("buffer-pool curve needs at least one point")]
    EmptyCurve,
    #[error("buffer-pool curve must be strictly increasing in size and non-decreasing in hit rate")]
    UnsortedCurve,
    #[error("hit rate {0} outside [0, 1]")]
    BadHitRate(f64),
    #[error("buffer-pool size must be positive")]
    ZeroSize,
    #[error("cost `{0}` must be finite and non-negative")]
    BadCost(&'static str),
    #[error("monitor period must be positive")]
    BadPeriod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferPoolModel {
    /// Buffer size in bytes.
    pub size: u64,
    /// `(size bytes, hit rate)` calibration points.
    pub curve: Vec<(u64, f64)>,
}

pub fn default_curve() -> Vec<(u64, f64)> {
    vec![(32 * MIB, 0.97), (4 * GIB, 0.999)]
}

impl Default for BufferPoolModel {
    fn default() -> Self {
        Self {
            size: 32 * MIB,
            curve: default_curve(),
        }
    }
}

impl BufferPoolModel {
    pub fn new(size: u64, curve: Vec<(u64, f64)>) -> Result<Self, DbModelError> {
        let m = Self { size, curve };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<(), DbModelError> {
        if self.size == 0 {
            return Err(DbModelError::ZeroSize);
        }
        if self.curve.is_empty() {
            return Err(DbModelError::EmptyCurve);
        }
        for &(s, h) in &self.curve {
            if s == 0 {
                return Err(DbModelError::ZeroSize);
            }
            if !(0.0..=1.0).contains(&h) {
                return Err(DbModelError::BadHitRate(h));
            }
        }
        if self
            .curve
            .windows(2)
            .any(|w| w[0].0 >= w[1].0 || w[0].1 > w[1].1)
        {
            return Err(DbModelError::UnsortedCurve);
        }
        Ok(())
    }

    pub fn hit_rate(&self) -> f64 {
        self.hit_rate_at(self.size)
    }

    /// Piecewise-linear in `ln(size)`, clamped to the end points.
    pub fn hit_rate_at(&self, size: u64) -> f64 {
        let c = &self.curve;
        let (first, last) = (c[0], c[c.len() - 1]);
        if size <= first.0 {
            return first.1;
        }
        if size >= last.0 {
            return last.1;
        }
        let i = c.partition_point(|p| p.0 <= size);
        let (lo, hi) = (c[i - 1], c[i]);
        if lo.0 == size {
            return lo.1;
        }
        let x = (size as f64).ln();
        let (x0, x1) = ((lo.0 as f64).ln(), (hi.0 as f64).ln());
        lo.1 + (hi.1 - lo.1) * (x - x0) / (x1 - x0)
    }
}

/// Expected-value demand on the DB stations.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DbDemand {
    /// DB-CPU seconds.
    pub cpu: f64,
    /// DB-disk seconds.
    pub disk: f64,
    /// Expected buffer-miss reads.
    pub reads: f64,
    pub fsyncs: u64,
}

impl std::ops::AddAssign for DbDemand {
    fn add_assign(&mut self, o: Self) {
        self.cpu += o.cpu;
        self.disk += o.disk;
        self.reads += o.reads;
        self.fsyncs += o.fsyncs;
    }
}

pub fn charge_scan(stats: &ScanStats, model: &BufferPoolModel, costs: &CostProfile) -> DbDemand {
    let rows = stats.rows_scanned as f64;
    let reads = if stats.covering {
        0.0
    } else {
        rows * (1.0 - model.hit_rate())
    };
    DbDemand {
        cpu: rows * costs.t_row,
        disk: reads * costs.t_disk,
        reads,
        fsyncs: 0,
    }
}

pub fn charge_write(costs: &CostProfile) -> DbDemand {
    DbDemand {
        cpu: 0.0,
        disk: costs.t_fsync,
        reads: 0.0,
        fsyncs: 1,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MonitorKind {
    RequestMonitor,
    NamespaceMonitor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorAgent {
    pub kind: MonitorKind,
    pub period: f64,
    pub enabled: bool,
    /// Request monitor: look-back of the `stime` query, seconds.
    pub window: f64,
}

impl MonitorAgent {
    pub fn request_monitor() -> Self {
        Self {
            kind: MonitorKind::RequestMonitor,
            period: 60.0,
            enabled: true,
            window: 600.0,
        }
    }

    pub fn namespace_monitor() -> Self {
        Self {
            kind: MonitorKind::NamespaceMonitor,
            period: 300.0,
            enabled: true,
            window: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DbModelError> {
        if !(self.period.is_finite() && self.period > 0.0) {
            return Err(DbModelError::BadPeriod);
        }
        Ok(())
    }

    /// Runs one tick's queries against `store` and returns their stats.
    pub fn tick(
        &self,
        store: &Store,
        catalog: &Catalog,
        now: f64,
    ) -> Result<Vec<ScanStats>, StoreError> {
        if !self.enabled {
            return Ok(Vec::new());
        }
        match self.kind {
            MonitorKind::RequestMonitor => {
                let put = store.table_id(PUT_FILEREQ_TABLE)?;
                let req = store.table_id(REQ_TABLE)?;
                let a = store.select(
                    put,
                    &Predicate::all().eq("status", "PENDING"),
                    &Projection::columns(["rowid"]),
                )?;
                let b = store.select(
                    req,
                    &Predicate::all().gt("stime", now - self.window),
                    &Projection::columns(["rowid"]),
                )?;
                Ok(vec![a.stats, b.stats])
            }
            MonitorKind::NamespaceMonitor => match catalog.usage_by_group(store) {
                Ok((_, stats)) => Ok(vec![stats]),
                Err(crate::namespace::NamespaceError::Store(e)) => Err(e),
                Err(_) => Ok(Vec::new()),
            },
        }
    }
}

/// Total rows scanned by a tick.
pub fn tick_rows(stats: &[ScanStats]) -> u64 {
    stats.iter().map(|s| s.rows_scanned).sum()
}
