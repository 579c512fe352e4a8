use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use super::{JobResult, RunReport};
use crate::desengine::UtilisationSeries;

pub const REPORT_VERSION: u32 = 1;

/// One finished (or refused) transfer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRecord {
    pub t: f64,
    pub dn: String,
    pub ok: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TransferBucket {
    pub bucket_start: u64,
    pub dn: String,
    /// `success` or `failure`.
    pub outcome: String,
    pub count: u64,
}

/// Counts transfers per `(bucket, dn, outcome)`, ordered by bucket start.
pub fn bucketize(log: &[TransferRecord], bucket_seconds: f64) -> Vec<TransferBucket> {
    let mut counts: BTreeMap<(u64, &str, &str), u64> = BTreeMap::new();
    for r in log {
        let b = (r.t.max(0.0) / bucket_seconds).floor() as u64;
        let outcome = if r.ok { "success" } else { "failure" };
        *counts.entry((b, &r.dn, outcome)).or_default() += 1;
    }
    counts
        .into_iter()
        .map(|((b, dn, outcome), count)| TransferBucket {
            bucket_start: (b as f64 * bucket_seconds) as u64,
            dn: dn.to_owned(),
            outcome: outcome.to_owned(),
            count,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub jobs_finished: u32,
    pub mean_event_rate: f64,
    pub median_event_rate: f64,
    pub mean_efficiency: f64,
    /// All events processed over the makespan.
    pub aggregate_event_rate: f64,
    pub peak_success_bucket: u64,
    pub peak_failure_bucket: u64,
    pub total_successes: u64,
    pub total_failures: u64,
    pub makespan: f64,
    pub station_peak: BTreeMap<String, f64>,
    pub station_mean: BTreeMap<String, f64>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

fn peak_bucket(buckets: &[TransferBucket], outcome: &str) -> u64 {
    let mut per: BTreeMap<u64, u64> = BTreeMap::new();
    for b in buckets.iter().filter(|b| b.outcome == outcome) {
        *per.entry(b.bucket_start).or_default() += b.count;
    }
    per.values().copied().max().unwrap_or(0)
}

impl RunSummary {
    pub fn new(
        name: &str,
        jobs: &[JobResult],
        buckets: &[TransferBucket],
        utilisation: &[UtilisationSeries],
        makespan: f64,
    ) -> Self {
        let finished: Vec<&JobResult> = jobs.iter().filter(|j| j.finished).collect();
        let rates: Vec<f64> = finished.iter().map(|j| j.event_rate).collect();
        let effs: Vec<f64> = finished.iter().map(|j| j.efficiency).collect();
        let events: u64 = jobs.iter().map(|j| j.events_done).sum();
        let total = |o: &str| {
            buckets
                .iter()
                .filter(|b| b.outcome == o)
                .map(|b| b.count)
                .sum()
        };
        Self {
            name: name.to_owned(),
            jobs_finished: finished.len() as u32,
            mean_event_rate: mean(&rates),
            median_event_rate: median(&rates),
            mean_efficiency: mean(&effs),
            aggregate_event_rate: if makespan > 0.0 {
                events as f64 / makespan
            } else {
                0.0
            },
            peak_success_bucket: peak_bucket(buckets, "success"),
            peak_failure_bucket: peak_bucket(buckets, "failure"),
            total_successes: total("success"),
            total_failures: total("failure"),
            makespan,
            station_peak: utilisation
                .iter()
                .map(|u| (u.station.clone(), u.peak()))
                .collect(),
            station_mean: utilisation
                .iter()
                .map(|u| (u.station.clone(), u.mean()))
                .collect(),
        }
    }

    /// Scalar metrics by name; `peak:<station>` and `mean:<station>` read
    /// utilisation.
    pub fn metric(&self, name: &str) -> Option<f64> {
        if let Some(st) = name.strip_prefix("peak:") {
            return self.station_peak.get(st).copied();
        }
        if let Some(st) = name.strip_prefix("mean:") {
            return self.station_mean.get(st).copied();
        }
        Some(match name {
            "mean_event_rate" => self.mean_event_rate,
            "median_event_rate" => self.median_event_rate,
            "mean_efficiency" => self.mean_efficiency,
            "aggregate_event_rate" => self.aggregate_event_rate,
            "peak_success_bucket" => self.peak_success_bucket as f64,
            "peak_failure_bucket" => self.peak_failure_bucket as f64,
            "total_successes" => self.total_successes as f64,
            "total_failures" => self.total_failures as f64,
            "makespan" => self.makespan,
            "max_link_peak" => self
                .station_peak
                .iter()
                .filter(|(k, _)| k.starts_with("link:"))
                .map(|(_, v)| *v)
                .fold(0.0, f64::max),
            _ => return None,
        })
    }
}

/// Metrics compared across reports.
pub const COMPARED: [&str; 9] = [
    "mean_event_rate",
    "median_event_rate",
    "mean_efficiency",
    "aggregate_event_rate",
    "peak_success_bucket",
    "peak_failure_bucket",
    "total_successes",
    "total_failures",
    "max_link_peak",
];

/// `a / b`, with `0 / 0 = 1` (no change) and `x / 0 = ∞`.
pub fn ratio(a: f64, b: f64) -> f64 {
    if b == 0.0 {
        if a == 0.0 {
            1.0
        } else {
            f64::INFINITY
        }
    } else {
        a / b
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioRow {
    pub numerator: String,
    pub denominator: String,
    pub metric: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub summaries: Vec<RunSummary>,
    pub ratios: Vec<RatioRow>,
}

impl Comparison {
    pub fn ratio(&self, numerator: &str, denominator: &str, metric: &str) -> Option<f64> {
        let a = self.summaries.iter().find(|s| s.name == numerator)?;
        let b = self.summaries.iter().find(|s| s.name == denominator)?;
        Some(ratio(a.metric(metric)?, b.metric(metric)?))
    }
}

/// Per-scenario metrics plus the ratio of every later report to every
/// earlier one (a lone report is compared with itself).
pub fn summarize(reports: &[&RunReport]) -> Comparison {
    let summaries: Vec<RunSummary> = reports.iter().map(|r| r.summary.clone()).collect();
    let mut pairs = Vec::new();
    for j in 0..summaries.len() {
        for i in 0..j {
            pairs.push((j, i));
        }
    }
    if summaries.len() == 1 {
        pairs.push((0, 0));
    }
    let mut ratios = Vec::new();
    for (j, i) in pairs {
        for m in COMPARED {
            let a = summaries[j].metric(m).unwrap_or(0.0);
            let b = summaries[i].metric(m).unwrap_or(0.0);
            ratios.push(RatioRow {
                numerator: summaries[j].name.clone(),
                denominator: summaries[i].name.clone(),
                metric: m.to_owned(),
                value: ratio(a, b),
            });
        }
    }
    Comparison { summaries, ratios }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:<24}", "metric")?;
        for s in &self.summaries {
            write!(f, "{:>14}", s.name)?;
        }
        writeln!(f)?;
        for m in COMPARED {
            write!(f, "{m:<24}")?;
            for s in &self.summaries {
                write!(f, "{:>14.4}", s.metric(m).unwrap_or(f64::NAN))?;
            }
            writeln!(f)?;
        }
        let stations: std::collections::BTreeSet<&String> = self
            .summaries
            .iter()
            .flat_map(|s| s.station_peak.keys())
            .collect();
        for st in stations {
            write!(f, "{:<24}", format!("peak:{st}"))?;
            for s in &self.summaries {
                write!(f, "{:>14.4}", s.station_peak.get(st).copied().unwrap_or(f64::NAN))?;
            }
            writeln!(f)?;
        }
        writeln!(f)?;
        for r in &self.ratios {
            writeln!(
                f,
                "{}/{} {:<24} {:.4}",
                r.numerator, r.denominator, r.metric, r.value
            )?;
        }
        Ok(())
    }
}
