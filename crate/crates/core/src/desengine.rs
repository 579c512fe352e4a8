//! Deterministic discrete-event core.
//!
//! An [`Engine`] owns the virtual clock, a priority queue of user events and a
//! set of shared-resource [`Station`]s. Callers submit *demands* (service
//! units: CPU-seconds, disk-seconds or bytes) to stations; when a demand has
//! been fully served, the event supplied with it is delivered through
//! [`Engine::next`].
//!
//! Events scheduled for the same instant fire in insertion order. The engine
//! is single-threaded; independent scenario runs use independent engines.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Virtual time in seconds.
pub type SimTime = f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct StationId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DemandId(u64);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discipline {
    ProcessorSharing,
    Fcfs,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StationSpec {
    pub name: String,
    pub discipline: Discipline,
    /// Service units per second delivered when the station is fully busy.
    pub capacity: f64,
    /// Upper bound on the rate a single demand can receive (one core of a
    /// multi-core CPU). `None` lets one demand use the whole capacity.
    pub per_demand_cap: Option<f64>,
}

impl StationSpec {
    pub fn ps(name: impl Into<String>, capacity: f64) -> Self {
        Self {
            name: name.into(),
            discipline: Discipline::ProcessorSharing,
            capacity,
            per_demand_cap: None,
        }
    }

    pub fn fcfs(name: impl Into<String>, capacity: f64) -> Self {
        Self {
            name: name.into(),
            discipline: Discipline::Fcfs,
            capacity,
            per_demand_cap: None,
        }
    }

    /// A processor-sharing CPU of `cores` cores, each serving one CPU-second
    /// per second.
    pub fn cpu(name: impl Into<String>, cores: u32) -> Self {
        Self {
            name: name.into(),
            discipline: Discipline::ProcessorSharing,
            capacity: f64::from(cores),
            per_demand_cap: Some(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EngineError {
    #[error("cannot schedule at t={at} before now={now}")]
    InPast { at: SimTime, now: SimTime },
    #[error("unknown station {0:?}")]
    UnknownStation(StationId),
    #[error("invalid demand size {0}")]
    InvalidSize(f64),
    #[error("invalid station `{name}`: {reason}")]
    InvalidStation { name: String, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceKind {
    Arrive,
    Depart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub t: SimTime,
    pub station: String,
    pub owner: u64,
    pub event: TraceKind,
}

impl TraceRecord {
    pub fn line(&self) -> String {
        let ev = match self.event {
            TraceKind::Arrive => "arrive",
            TraceKind::Depart => "depart",
        };
        format!(
            "t={} station={} owner={} event={ev}",
            self.t, self.station, self.owner
        )
    }
}

/// Busy fraction per bucket for one station.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtilisationSeries {
    pub station: String,
    pub bucket_seconds: f64,
    /// `(bucket_start, busy_fraction)`, contiguous from t = 0.
    pub buckets: Vec<(SimTime, f64)>,
    pub until: SimTime,
}

impl UtilisationSeries {
    /// Highest busy fraction over complete buckets; a trailing partial
    /// bucket only counts when there is nothing else.
    pub fn peak(&self) -> f64 {
        let full = self
            .buckets
            .iter()
            .filter(|(t, _)| t + self.bucket_seconds <= self.until + 1e-9);
        let p = full.map(|(_, u)| *u).fold(f64::NAN, f64::max);
        if p.is_nan() {
            self.buckets.iter().map(|(_, u)| *u).fold(0.0, f64::max)
        } else {
            p
        }
    }

    pub fn mean(&self) -> f64 {
        if self.buckets.is_empty() {
            return 0.0;
        }
        self.buckets.iter().map(|(_, u)| *u).sum::<f64>() / self.buckets.len() as f64
    }
}

struct Active<E> {
    id: DemandId,
    owner: u64,
    remaining: f64,
    on_done: E,
}

pub struct Station<E> {
    spec: StationSpec,
    /// PS: every resident demand. FCFS: the queue, head in service.
    active: Vec<Active<E>>,
    epoch: u64,
    last_update: SimTime,
    served: f64,
    rate: f64,
    /// `(since, total service rate)` change points.
    rate_log: Vec<(SimTime, f64)>,
}

impl<E> Station<E> {
    fn per_demand_rate(&self) -> f64 {
        let k = self.active.len();
        if k == 0 {
            return 0.0;
        }
        let share = match self.spec.discipline {
            Discipline::ProcessorSharing => self.spec.capacity / k as f64,
            Discipline::Fcfs => self.spec.capacity,
        };
        match self.spec.per_demand_cap {
            Some(cap) => share.min(cap),
            None => share,
        }
    }

    fn in_service(&self) -> usize {
        match self.spec.discipline {
            Discipline::ProcessorSharing => self.active.len(),
            Discipline::Fcfs => self.active.len().min(1),
        }
    }

    fn advance(&mut self, now: SimTime) {
        let dt = now - self.last_update;
        if dt > 0.0 && !self.active.is_empty() {
            let r = self.per_demand_rate();
            let n = self.in_service();
            for a in self.active.iter_mut().take(n) {
                let step = (r * dt).min(a.remaining);
                a.remaining -= step;
                self.served += step;
            }
        }
        self.last_update = now;
    }

    fn record_rate(&mut self, now: SimTime) {
        let rate = self.per_demand_rate() * self.in_service() as f64;
        if rate != self.rate {
            match self.rate_log.last_mut() {
                Some(last) if last.0 == now => last.1 = rate,
                _ => self.rate_log.push((now, rate)),
            }
            self.rate = rate;
        }
    }

    /// Index and time-to-finish of the next demand to complete.
    fn next_completion(&self) -> Option<(usize, f64)> {
        let r = self.per_demand_rate();
        if r <= 0.0 {
            return None;
        }
        let n = self.in_service();
        self.active
            .iter()
            .take(n)
            .enumerate()
            .min_by(|a, b| a.1.remaining.total_cmp(&b.1.remaining))
            .map(|(i, a)| (i, a.remaining / r))
    }

    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn spec(&self) -> &StationSpec {
        &self.spec
    }

    pub fn active_len(&self) -> usize {
        self.active.len()
    }

    /// Work served so far (service units).
    pub fn served(&self) -> f64 {
        self.served
    }
}

enum Pending<E> {
    User(E),
    Wake { station: usize, epoch: u64 },
}

struct Entry<E> {
    at: SimTime,
    seq: u64,
    pending: Pending<E>,
}

impl<E> PartialEq for Entry<E> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<E> Eq for Entry<E> {}

impl<E> PartialOrd for Entry<E> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Entry<E> {
    // reversed: BinaryHeap is a max-heap
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .at
            .total_cmp(&self.at)
            .then_with(|| other.seq.cmp(&self.seq))
    }
}

pub struct Engine<E> {
    now: SimTime,
    seq: u64,
    queue: BinaryHeap<Entry<E>>,
    stations: Vec<Station<E>>,
    next_demand: u64,
    trace: Option<Vec<TraceRecord>>,
}

impl<E> Default for Engine<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E> Engine<E> {
    pub fn new() -> Self {
        Self {
            now: 0.0,
            seq: 0,
            queue: BinaryHeap::new(),
            stations: Vec::new(),
            next_demand: 0,
            trace: None,
        }
    }

    pub fn enable_trace(&mut self) {
        self.trace.get_or_insert_with(Vec::new);
    }

    pub fn trace(&self) -> &[TraceRecord] {
        self.trace.as_deref().unwrap_or(&[])
    }

    pub fn trace_text(&self) -> String {
        let mut out = String::new();
        for r in self.trace() {
            let _ = writeln!(out, "{}", r.line());
        }
        out
    }

    pub fn now(&self) -> SimTime {
        self.now
    }

    pub fn add_station(&mut self, spec: StationSpec) -> Result<StationId, EngineError> {
        let bad = |reason: &str| EngineError::InvalidStation {
            name: spec.name.clone(),
            reason: reason.to_owned(),
        };
        if !(spec.capacity.is_finite() && spec.capacity > 0.0) {
            return Err(bad("capacity must be positive"));
        }
        if let Some(cap) = spec.per_demand_cap {
            if !(cap.is_finite() && cap > 0.0) {
                return Err(bad("per-demand cap must be positive"));
            }
        }
        self.stations.push(Station {
            spec,
            active: Vec::new(),
            epoch: 0,
            last_update: self.now,
            served: 0.0,
            rate: 0.0,
            rate_log: Vec::new(),
        });
        Ok(StationId(self.stations.len() - 1))
    }

    pub fn station(&self, id: StationId) -> Result<&Station<E>, EngineError> {
        self.stations.get(id.0).ok_or(EngineError::UnknownStation(id))
    }

    pub fn stations(&self) -> impl Iterator<Item = (StationId, &Station<E>)> {
        self.stations.iter().enumerate().map(|(i, s)| (StationId(i), s))
    }

    pub fn station_by_name(&self, name: &str) -> Option<StationId> {
        self.stations.iter().position(|s| s.spec.name == name).map(StationId)
    }

    fn push(&mut self, at: SimTime, pending: Pending<E>) {
        self.seq += 1;
        self.queue.push(Entry {
            at,
            seq: self.seq,
            pending,
        });
    }

    pub fn schedule(&mut self, at: SimTime, event: E) -> Result<(), EngineError> {
        if !(at >= self.now) || !at.is_finite() {
            return Err(EngineError::InPast { at, now: self.now });
        }
        self.push(at, Pending::User(event));
        Ok(())
    }

    pub fn schedule_in(&mut self, delay: SimTime, event: E) -> Result<(), EngineError> {
        self.schedule(self.now + delay.max(0.0), event)
    }

    fn note(&mut self, station: usize, owner: u64, event: TraceKind) {
        if let Some(trace) = self.trace.as_mut() {
            trace.push(TraceRecord {
                t: self.now,
                station: self.stations[station].spec.name.clone(),
                owner,
                event,
            });
        }
    }

    fn reschedule(&mut self, station: usize) {
        let now = self.now;
        let st = &mut self.stations[station];
        st.record_rate(now);
        st.epoch += 1;
        let epoch = st.epoch;
        if let Some((_, dt)) = st.next_completion() {
            self.push(now + dt, Pending::Wake { station, epoch });
        }
    }

    /// Submits `size` service units to `station`; `on_done` is delivered when
    /// the demand has been fully served.
    pub fn submit(
        &mut self,
        station: StationId,
        size: f64,
        owner: u64,
        on_done: E,
    ) -> Result<DemandId, EngineError> {
        if station.0 >= self.stations.len() {
            return Err(EngineError::UnknownStation(station));
        }
        if !(size.is_finite() && size >= 0.0) {
            return Err(EngineError::InvalidSize(size));
        }
        let id = DemandId(self.next_demand);
        self.next_demand += 1;
        self.note(station.0, owner, TraceKind::Arrive);
        let now = self.now;
        let st = &mut self.stations[station.0];
        st.advance(now);
        st.active.push(Active {
            id,
            owner,
            remaining: size,
            on_done,
        });
        self.reschedule(station.0);
        Ok(id)
    }

    /// Withdraws a demand before completion. Returns its unserved remainder
    /// and its completion event, or `None` if it already finished.
    pub fn cancel(&mut self, station: StationId, demand: DemandId) -> Option<(f64, E)> {
        let now = self.now;
        let st = self.stations.get_mut(station.0)?;
        let pos = st.active.iter().position(|a| a.id == demand)?;
        st.advance(now);
        let a = st.active.remove(pos);
        let owner = a.owner;
        self.note(station.0, owner, TraceKind::Depart);
        self.reschedule(station.0);
        Some((a.remaining, a.on_done))
    }

    fn complete(&mut self, station: usize, epoch: u64) {
        let now = self.now;
        let st = &mut self.stations[station];
        if st.epoch != epoch {
            return;
        }
        let target = st.next_completion().map(|(i, _)| i);
        st.advance(now);
        let r = st.per_demand_rate();
        let eps = r * 1e-9;
        let n = st.in_service();
        let mut done = Vec::new();
        let mut i = 0;
        let mut served_before = 0;
        while i < st.active.len() {
            let in_service = served_before < n;
            served_before += 1;
            let due = in_service && (st.active[i].remaining <= eps || Some(served_before - 1) == target);
            if due {
                let a = st.active.remove(i);
                st.served += a.remaining;
                done.push((a.owner, a.on_done));
            } else {
                i += 1;
            }
        }
        for (owner, ev) in done {
            self.note(station, owner, TraceKind::Depart);
            self.push(now, Pending::User(ev));
        }
        self.reschedule(station);
    }

    /// Advances the clock to the next user event and returns it.
    pub fn next(&mut self) -> Option<(SimTime, E)> {
        while let Some(entry) = self.queue.pop() {
            debug_assert!(entry.at >= self.now);
            self.now = entry.at;
            match entry.pending {
                Pending::User(e) => return Some((self.now, e)),
                Pending::Wake { station, epoch } => self.complete(station, epoch),
            }
        }
        None
    }

    /// Time of the next pending entry, if any.
    pub fn peek_time(&self) -> Option<SimTime> {
        self.queue.peek().map(|e| e.at)
    }

    /// Busy fraction of `station` per bucket over `[0, until)`.
    pub fn utilisation(
        &self,
        station: StationId,
        bucket_seconds: f64,
        until: SimTime,
    ) -> Result<UtilisationSeries, EngineError> {
        let st = self.station(station)?;
        let n = if until > 0.0 {
            (until / bucket_seconds).ceil() as usize
        } else {
            0
        };
        let mut busy = vec![0.0; n];
        let log = &st.rate_log;
        for (i, &(start, rate)) in log.iter().enumerate() {
            if rate <= 0.0 {
                continue;
            }
            let end = log.get(i + 1).map_or(until, |next| next.0).min(until);
            let mut t = start;
            while t < end {
                let b = (t / bucket_seconds).floor() as usize;
                if b >= n {
                    break;
                }
                let bucket_end = ((b + 1) as f64 * bucket_seconds).min(end);
                busy[b] += (bucket_end - t) * rate;
                t = bucket_end;
            }
        }
        let cap = st.spec.capacity;
        let buckets = busy
            .into_iter()
            .enumerate()
            .map(|(b, work)| {
                let start = b as f64 * bucket_seconds;
                let width = (until - start).min(bucket_seconds);
                (start, (work / (cap * width)).clamp(0.0, 1.0))
            })
            .collect();
        Ok(UtilisationSeries {
            station: st.spec.name.clone(),
            bucket_seconds,
            buckets,
            until,
        })
    }
}
