//! Scenario files: the closed-world description of one load test.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::broker::{get_filereq_schema, put_filereq_schema, req_schema};
use crate::dbmodel::{BufferPoolModel, CostProfile, MonitorAgent, MonitorKind};
use crate::namespace::{metadata_schema, replica_schema, Replica};
use crate::pools::{FilesystemSpec, PoolSpec};
use crate::tablestore::{TableSchema, ROWID};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(String),
    #[error("invalid scenario: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum Topology {
    /// Services and database share one head node.
    Combined { head_cores: u32 },
    /// Services on one host, database on another.
    Split { service_cores: u32, db_cores: u32 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolsConfig {
    pub count: u32,
    /// Bytes per second per pool server.
    pub link_capacity: f64,
    pub filesystems: u32,
    pub fs_capacity: u64,
}

impl PoolsConfig {
    pub fn specs(&self) -> Vec<PoolSpec> {
        (0..self.count)
            .map(|p| PoolSpec {
                name: format!("pool{p:02}"),
                link_capacity: self.link_capacity,
                filesystems: (1..=self.filesystems)
                    .map(|f| FilesystemSpec {
                        name: format!("fs{f}"),
                        capacity: self.fs_capacity,
                    })
                    .collect(),
            })
            .collect()
    }

    pub fn replicas(&self) -> Vec<Replica> {
        self.specs()
            .iter()
            .flat_map(|p| {
                p.filesystems
                    .iter()
                    .map(move |f| Replica::new(p.name.clone(), f.name.clone()))
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BufferConfig {
    pub size: u64,
    pub curve: Vec<(u64, f64)>,
}

impl BufferConfig {
    pub fn model(&self) -> BufferPoolModel {
        BufferPoolModel {
            size: self.size,
            curve: self.curve.clone(),
        }
    }
}

impl Default for BufferConfig {
    fn default() -> Self {
        let m = BufferPoolModel::default();
        Self {
            size: m.size,
            curve: m.curve,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexConfig {
    pub table: String,
    pub name: String,
    pub columns: Vec<String>,
    /// Existing index dropped once this one is in place.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub replaces: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorConfig {
    pub enabled: bool,
    pub period: f64,
    #[serde(default)]
    pub window: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MonitorsConfig {
    pub request_monitor: MonitorConfig,
    pub namespace_monitor: MonitorConfig,
}

impl MonitorsConfig {
    pub fn agents(&self) -> Vec<MonitorAgent> {
        [
            (MonitorKind::RequestMonitor, &self.request_monitor),
            (MonitorKind::NamespaceMonitor, &self.namespace_monitor),
        ]
        .into_iter()
        .map(|(kind, c)| MonitorAgent {
            kind,
            period: c.period,
            enabled: c.enabled,
            window: c.window,
        })
        .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CatalogConfig {
    pub n_files: u64,
    /// Files the analysis jobs read; the first `dataset_files` of the catalog.
    pub dataset_files: u64,
    pub n_groups: u32,
    pub replicas_per_file: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistoryConfig {
    /// Finished get requests, spread over the dataset files.
    pub get_rows: u64,
    pub put_rows: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OnFailure {
    /// Move on to the next file.
    Skip,
    /// End the job.
    Abort,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSpec {
    pub dn: String,
    pub n_files: u32,
    pub file_size: u64,
    pub events_per_file: u64,
    pub t_cpu_per_event: f64,
    pub pin_lifetime: f64,
    /// Bytes written back per job through a put; 0 disables it.
    #[serde(default)]
    pub output_size: u64,
}

impl JobSpec {
    pub fn total_events(&self) -> u64 {
        u64::from(self.n_files) * self.events_per_file
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadConfig {
    pub n_jobs: u32,
    pub slots: u32,
    /// Jobs start up to this many seconds after their slot frees.
    pub admission_jitter: f64,
    pub duration_cap: f64,
    pub on_failure: OnFailure,
    pub job: JobSpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub name: String,
    pub seed: u64,
    pub bucket_seconds: f64,
    /// Transfer timeout, seconds.
    pub timeout: f64,
    pub topology: Topology,
    pub costs: CostProfile,
    pub buffer: BufferConfig,
    #[serde(default)]
    pub indices: Vec<IndexConfig>,
    pub monitors: MonitorsConfig,
    pub catalog: CatalogConfig,
    pub history: HistoryConfig,
    pub pools: PoolsConfig,
    pub workload: WorkloadConfig,
}

fn known_schemas() -> Vec<TableSchema> {
    vec![
        metadata_schema(),
        replica_schema(),
        req_schema(),
        get_filereq_schema(),
        put_filereq_schema(),
    ]
}

/// Indices present before any scenario index is installed.
fn stock_indices() -> Vec<(String, String)> {
    use crate::broker::{GET_FILEREQ_TABLE, PUT_FILEREQ_TABLE, REQ_TABLE};
    use crate::namespace::{METADATA_TABLE, REPLICA_TABLE};
    [
        (METADATA_TABLE, "pfn_idx"),
        (REPLICA_TABLE, "replica_fileid"),
        (REQ_TABLE, "token_idx"),
        (GET_FILEREQ_TABLE, "pfn_idx"),
        (PUT_FILEREQ_TABLE, "put_pfn_idx"),
    ]
    .into_iter()
    .map(|(t, i)| (t.to_owned(), i.to_owned()))
    .collect()
}

fn positive(name: &str, v: f64) -> Result<(), ConfigError> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(ConfigError::Invalid(format!("{name} must be positive, got {v}")))
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            ConfigError::Parse(m) => ConfigError::Parse(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let inv = |m: String| ConfigError::Invalid(m);
        if self.name.is_empty() {
            return Err(inv("name must not be empty".into()));
        }
        positive("bucket_seconds", self.bucket_seconds)?;
        positive("timeout", self.timeout)?;
        match self.topology {
            Topology::Combined { head_cores } if head_cores == 0 => {
                return Err(inv("topology.head_cores must be ≥ 1".into()))
            }
            Topology::Split {
                service_cores,
                db_cores,
            } if service_cores == 0 || db_cores == 0 => {
                return Err(inv("topology cores must be ≥ 1".into()))
            }
            _ => {}
        }
        self.costs
            .validate()
            .map_err(|e| inv(format!("costs: {e}")))?;
        self.buffer
            .model()
            .validate()
            .map_err(|e| inv(format!("buffer: {e}")))?;
        for m in self.monitors.agents() {
            m.validate()
                .map_err(|e| inv(format!("monitors.{:?}: {e}", m.kind)))?;
        }

        let schemas = known_schemas();
        let mut present: BTreeSet<(String, String)> = stock_indices().into_iter().collect();
        for ix in &self.indices {
            let schema = schemas
                .iter()
                .find(|s| s.name == ix.table)
                .ok_or_else(|| inv(format!("index `{}`: unknown table `{}`", ix.name, ix.table)))?;
            if ix.columns.is_empty() {
                return Err(inv(format!("index `{}` has no columns", ix.name)));
            }
            for c in &ix.columns {
                if c != ROWID && schema.position(c).is_none() {
                    return Err(inv(format!(
                        "index `{}`: table `{}` has no column `{c}`",
                        ix.name, ix.table
                    )));
                }
            }
            if !present.insert((ix.table.clone(), ix.name.clone())) {
                return Err(inv(format!("index `{}` on `{}` already exists", ix.name, ix.table)));
            }
            if let Some(old) = &ix.replaces {
                if !present.remove(&(ix.table.clone(), old.clone())) {
                    return Err(inv(format!(
                        "index `{}` replaces unknown index `{old}` on `{}`",
                        ix.name, ix.table
                    )));
                }
            }
        }

        let c = &self.catalog;
        if c.dataset_files == 0 || c.dataset_files > c.n_files {
            return Err(inv("catalog.dataset_files must be in 1..=n_files".into()));
        }
        if c.n_groups == 0 {
            return Err(inv("catalog.n_groups must be ≥ 1".into()));
        }
        let p = &self.pools;
        if p.count == 0 || p.filesystems == 0 || p.fs_capacity == 0 {
            return Err(inv("pools need at least one filesystem with capacity".into()));
        }
        positive("pools.link_capacity", p.link_capacity)?;
        let fs_total = u64::from(p.count) * u64::from(p.filesystems);
        if c.replicas_per_file == 0 || u64::from(c.replicas_per_file) > fs_total {
            return Err(inv("catalog.replicas_per_file must be in 1..=filesystems".into()));
        }

        let w = &self.workload;
        if w.n_jobs == 0 || w.slots == 0 {
            return Err(inv("workload needs n_jobs ≥ 1 and slots ≥ 1".into()));
        }
        if !(w.admission_jitter.is_finite() && w.admission_jitter >= 0.0) {
            return Err(inv("workload.admission_jitter must be ≥ 0".into()));
        }
        positive("workload.duration_cap", w.duration_cap)?;
        let j = &w.job;
        if j.n_files == 0 || j.file_size == 0 || j.events_per_file == 0 {
            return Err(inv("workload.job counts and sizes must be positive".into()));
        }
        positive("workload.job.t_cpu_per_event", j.t_cpu_per_event)?;
        positive("workload.job.pin_lifetime", j.pin_lifetime)?;
        Ok(())
    }

    /// Sets a tunable by name: a cost constant, `slots`, `timeout`,
    /// `admission_jitter`, `file_size` or `t_cpu_per_event`.
    pub fn set_param(&mut self, name: &str, v: f64) -> bool {
        match name {
            "slots" => self.workload.slots = v.round().max(1.0) as u32,
            "timeout" => self.timeout = v,
            "admission_jitter" => self.workload.admission_jitter = v,
            "file_size" => self.workload.job.file_size = v.round().max(1.0) as u64,
            "t_cpu_per_event" => self.workload.job.t_cpu_per_event = v,
            _ => return self.costs.set(name, v),
        }
        true
    }

    pub fn param(&self, name: &str) -> Option<f64> {
        match name {
            "slots" => Some(f64::from(self.workload.slots)),
            "timeout" => Some(self.timeout),
            "admission_jitter" => Some(self.workload.admission_jitter),
            "file_size" => Some(self.workload.job.file_size as f64),
            "t_cpu_per_event" => Some(self.workload.job.t_cpu_per_event),
            _ => self.costs.get(name),
        }
    }
}
