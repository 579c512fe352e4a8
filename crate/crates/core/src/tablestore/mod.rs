//! Embedded multi-table row store.
//!
//! Tables hold rows keyed by a monotonically assigned rowid and may carry
//! secondary B-tree indices (composite allowed). Queries are conjunctions of
//! column comparisons; a small planner picks an access path and reports the
//! work done as [`ScanStats`], which the database cost model turns into
//! simulated CPU and disk demand.
//!
//! Writers interact with two pieces of coordination state per table: an
//! exclusive [`TableLock`] (held while an index is built in locking mode) and a
//! set of registered writers. A table with registered writers or a held lock
//! cannot be renamed.
//!
//! The store is driven from a single logical thread; it is `Send` but has no
//! internal synchronisation.

mod predicate;
mod schema;
pub mod snapshot;
mod value;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::ops::{Bound, RangeBounds};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use predicate::{CmpOp, Predicate, Projection, Term};
pub use schema::{Column, IndexSpec, TableSchema, ROWID};
pub use value::{ColumnKind, Row, Value};

pub type RowId = u64;

/// Default weight of one index entry relative to a full row when a narrow
/// covering index is scanned end to end instead of the table.
pub const DEFAULT_COVERING_FACTOR: f64 = 0.005;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TableId(u32);

/// Opaque identity of a lock holder or registered writer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct OwnerId(pub u64);

impl std::fmt::Display for OwnerId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "owner#{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StoreError {
    #[error("table `{0}` already exists")]
    DuplicateTable(String),
    #[error("no such table `{0}`")]
    NoSuchTable(String),
    #[error("unknown table id {0:?}")]
    UnknownTable(TableId),
    #[error("table `{table}` is exclusively locked by {holder}")]
    Locked { table: String, holder: OwnerId },
    #[error("table `{table}` has active writers")]
    WritersActive { table: String },
    #[error("row does not match schema of `{table}`: {reason}")]
    SchemaMismatch { table: String, reason: String },
    #[error("unknown column `{column}` in `{table}`")]
    UnknownColumn { table: String, column: String },
    #[error("index on ({columns}) already exists on `{table}`")]
    DuplicateIndex { table: String, columns: String },
    #[error("no index `{index}` on `{table}`")]
    UnknownIndex { table: String, index: String },
    #[error("rowid {rowid} already present in `{table}`")]
    RowidCollision { table: String, rowid: RowId },
    #[error("invalid schema: {0}")]
    InvalidSchema(String),
}

/// Per-query accounting.
///
/// `rows_scanned` is measured in row equivalents: index lookups count the
/// candidate rows plus a `ceil(log2(n + 1))` descent, full scans count every
/// row, and end-to-end scans of a covering index count each entry at the
/// store's covering factor.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanStats {
    pub rows_scanned: u64,
    pub rows_returned: u64,
    pub index_used: Option<String>,
    pub covering: bool,
}

impl ScanStats {
    pub fn merge(&mut self, other: &ScanStats) {
        self.rows_scanned += other.rows_scanned;
        self.rows_returned += other.rows_returned;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TableLock {
    pub holder: OwnerId,
    pub acquired_at: f64,
    pub exclusive: bool,
}

/// An index build that holds the table lock until [`Store::finish_index_build`].
#[derive(Debug, Clone, PartialEq)]
pub struct IndexBuild {
    pub table: TableId,
    pub spec: IndexSpec,
    pub owner: OwnerId,
    /// Rows that must be read to build the index; the lock window is
    /// proportional to this.
    pub duration_rows: u64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub rows: Vec<(RowId, Row)>,
    pub stats: ScanStats,
}

/// Row image written to a tracked table.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedWrite {
    pub rowid: RowId,
    pub row: Row,
}

#[derive(Debug, Clone)]
struct Index {
    spec: IndexSpec,
    positions: Vec<usize>,
    entries: BTreeSet<(Vec<Value>, RowId)>,
}

impl Index {
    fn key(&self, row: &Row) -> Vec<Value> {
        self.positions.iter().map(|&p| row[p].clone()).collect()
    }
}

#[derive(Debug, Clone)]
struct Table {
    schema: TableSchema,
    rows: BTreeMap<RowId, Row>,
    next_rowid: RowId,
    indices: Vec<Index>,
    lock: Option<TableLock>,
    writers: BTreeSet<OwnerId>,
}

enum Access {
    Full,
    Primary { lo: Bound<RowId>, hi: Bound<RowId> },
    Index { pos: usize, eq: Vec<Value>, range: Option<(CmpOp, Value)> },
    IndexOnly { pos: usize },
}

#[derive(Debug, Clone)]
pub struct Store {
    tables: BTreeMap<TableId, Table>,
    names: BTreeMap<String, TableId>,
    next_id: u32,
    covering_factor: f64,
    write_logs: HashMap<String, Vec<LoggedWrite>>,
}

impl Default for Store {
    fn default() -> Self {
        Self::new()
    }
}

fn log2_descent(n: usize) -> u64 {
    // ceil(log2(n + 1))
    let m = n as u64 + 1;
    64 - (m - 1).leading_zeros() as u64
}

impl Store {
    pub fn new() -> Self {
        Self {
            tables: BTreeMap::new(),
            names: BTreeMap::new(),
            next_id: 0,
            covering_factor: DEFAULT_COVERING_FACTOR,
            write_logs: HashMap::new(),
        }
    }

    pub fn with_covering_factor(mut self, factor: f64) -> Self {
        assert!((0.0..=1.0).contains(&factor), "covering factor must lie in [0, 1]");
        self.covering_factor = factor;
        self
    }

    pub fn covering_factor(&self) -> f64 {
        self.covering_factor
    }

    pub fn create_table(&mut self, schema: TableSchema) -> Result<TableId, StoreError> {
        schema.validate()?;
        if self.names.contains_key(&schema.name) {
            return Err(StoreError::DuplicateTable(schema.name));
        }
        let id = TableId(self.next_id);
        self.next_id += 1;
        self.names.insert(schema.name.clone(), id);
        self.tables.insert(
            id,
            Table {
                schema,
                rows: BTreeMap::new(),
                next_rowid: 1,
                indices: Vec::new(),
                lock: None,
                writers: BTreeSet::new(),
            },
        );
        Ok(id)
    }

    /// Removes a table. Refused while it has writers or a lock holder.
    pub fn drop_table(&mut self, name: &str) -> Result<(), StoreError> {
        let id = self.table_id(name)?;
        let t = &self.tables[&id];
        if let Some(lock) = t.lock {
            return Err(StoreError::Locked {
                table: name.to_owned(),
                holder: lock.holder,
            });
        }
        if !t.writers.is_empty() {
            return Err(StoreError::WritersActive {
                table: name.to_owned(),
            });
        }
        self.names.remove(name);
        self.tables.remove(&id);
        Ok(())
    }

    pub fn table_id(&self, name: &str) -> Result<TableId, StoreError> {
        self.names
            .get(name)
            .copied()
            .ok_or_else(|| StoreError::NoSuchTable(name.to_owned()))
    }

    pub fn table_names(&self) -> impl Iterator<Item = &str> {
        self.names.keys().map(String::as_str)
    }

    fn table(&self, id: TableId) -> Result<&Table, StoreError> {
        self.tables.get(&id).ok_or(StoreError::UnknownTable(id))
    }

    fn table_mut(&mut self, id: TableId) -> Result<&mut Table, StoreError> {
        self.tables.get_mut(&id).ok_or(StoreError::UnknownTable(id))
    }

    pub fn schema(&self, id: TableId) -> Result<&TableSchema, StoreError> {
        Ok(&self.table(id)?.schema)
    }

    pub fn name(&self, id: TableId) -> Result<&str, StoreError> {
        Ok(&self.table(id)?.schema.name)
    }

    pub fn len(&self, id: TableId) -> Result<usize, StoreError> {
        Ok(self.table(id)?.rows.len())
    }

    pub fn is_empty(&self, id: TableId) -> Result<bool, StoreError> {
        Ok(self.table(id)?.rows.is_empty())
    }

    pub fn max_rowid(&self, id: TableId) -> Result<Option<RowId>, StoreError> {
        Ok(self.table(id)?.rows.keys().next_back().copied())
    }

    pub fn indices(&self, id: TableId) -> Result<Vec<IndexSpec>, StoreError> {
        Ok(self.table(id)?.indices.iter().map(|i| i.spec.clone()).collect())
    }

    pub fn rows(&self, id: TableId) -> Result<impl Iterator<Item = (RowId, &Row)>, StoreError> {
        Ok(self.table(id)?.rows.iter().map(|(r, row)| (*r, row)))
    }

    pub fn get(&self, id: TableId, rowid: RowId) -> Result<Option<&Row>, StoreError> {
        Ok(self.table(id)?.rows.get(&rowid))
    }

    pub fn lock(&self, id: TableId) -> Result<Option<TableLock>, StoreError> {
        Ok(self.table(id)?.lock)
    }

    pub fn lock_table(&mut self, id: TableId, owner: OwnerId, now: f64) -> Result<(), StoreError> {
        let t = self.table_mut(id)?;
        match t.lock {
            Some(l) if l.holder != owner => Err(StoreError::Locked {
                table: t.schema.name.clone(),
                holder: l.holder,
            }),
            Some(_) => Ok(()),
            None => {
                t.lock = Some(TableLock {
                    holder: owner,
                    acquired_at: now,
                    exclusive: true,
                });
                Ok(())
            }
        }
    }

    /// Releases the lock if `owner` holds it. Returns whether a lock was released.
    pub fn unlock_table(&mut self, id: TableId, owner: OwnerId) -> Result<bool, StoreError> {
        let t = self.table_mut(id)?;
        if t.lock.map(|l| l.holder) == Some(owner) {
            t.lock = None;
            Ok(true)
        } else {
            Ok(false)
        }
    }

    pub fn register_writer(&mut self, id: TableId, owner: OwnerId) -> Result<(), StoreError> {
        self.table_mut(id)?.writers.insert(owner);
        Ok(())
    }

    pub fn unregister_writer(&mut self, id: TableId, owner: OwnerId) -> Result<(), StoreError> {
        self.table_mut(id)?.writers.remove(&owner);
        Ok(())
    }

    pub fn writers(&self, id: TableId) -> Result<Vec<OwnerId>, StoreError> {
        Ok(self.table(id)?.writers.iter().copied().collect())
    }

    fn check_writable(t: &Table, owner: OwnerId) -> Result<(), StoreError> {
        match t.lock {
            Some(l) if l.holder != owner => Err(StoreError::Locked {
                table: t.schema.name.clone(),
                holder: l.holder,
            }),
            _ => Ok(()),
        }
    }

    fn check_row(t: &Table, row: &Row) -> Result<(), StoreError> {
        let cols = &t.schema.columns;
        if row.len() != cols.len() {
            return Err(StoreError::SchemaMismatch {
                table: t.schema.name.clone(),
                reason: format!("expected {} values, got {}", cols.len(), row.len()),
            });
        }
        for (v, c) in row.iter().zip(cols) {
            if !v.fits(c.kind) {
                return Err(StoreError::SchemaMismatch {
                    table: t.schema.name.clone(),
                    reason: format!("column `{}` expects {}, got {v}", c.name, c.kind.as_str()),
                });
            }
        }
        Ok(())
    }

    fn log_write(&mut self, id: TableId, rowid: RowId, row: &Row) {
        if self.write_logs.is_empty() {
            return;
        }
        let name = &self.tables[&id].schema.name;
        if let Some(log) = self.write_logs.get_mut(name) {
            log.push(LoggedWrite {
                rowid,
                row: row.clone(),
            });
        }
    }

    /// Starts recording every row image written to whichever table currently
    /// bears `name`. Recording follows the name across renames.
    pub fn track_writes(&mut self, name: &str) {
        self.write_logs.entry(name.to_owned()).or_default();
    }

    pub fn take_write_log(&mut self, name: &str) -> Vec<LoggedWrite> {
        self.write_logs.remove(name).unwrap_or_default()
    }

    pub fn write_log(&self, name: &str) -> &[LoggedWrite] {
        self.write_logs.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn insert(&mut self, id: TableId, owner: OwnerId, row: Row) -> Result<RowId, StoreError> {
        let t = self.table_mut(id)?;
        Self::check_writable(t, owner)?;
        Self::check_row(t, &row)?;
        let rowid = t.next_rowid;
        t.next_rowid += 1;
        for idx in &mut t.indices {
            let key = idx.key(&row);
            idx.entries.insert((key, rowid));
        }
        t.rows.insert(rowid, row);
        if !self.write_logs.is_empty() {
            let row = self.tables[&id].rows[&rowid].clone();
            self.log_write(id, rowid, &row);
        }
        Ok(rowid)
    }

    fn resolve_column(t: &Table, column: &str) -> Result<Option<usize>, StoreError> {
        if column == ROWID {
            return Ok(None);
        }
        t.schema
            .position(column)
            .map(Some)
            .ok_or_else(|| StoreError::UnknownColumn {
                table: t.schema.name.clone(),
                column: column.to_owned(),
            })
    }

    fn row_matches(positions: &[Option<usize>], pred: &Predicate, rowid: RowId, row: &Row) -> bool {
        pred.terms.iter().zip(positions).all(|(term, pos)| match pos {
            Some(p) => term.op.holds(&row[*p], &term.value),
            None => term.op.holds(&Value::Int(rowid as i64), &term.value),
        })
    }

    fn plan(t: &Table, pred: &Predicate, proj: &Projection) -> Access {
        // rowid equality is a unique primary-key probe
        let mut lo = Bound::Unbounded;
        let mut hi = Bound::Unbounded;
        let mut rowid_terms = 0;
        for term in pred.terms.iter().filter(|t| t.column == ROWID) {
            let Some(v) = term.value.as_int() else { continue };
            let v = v.max(0) as RowId;
            rowid_terms += 1;
            match term.op {
                CmpOp::Eq => {
                    return Access::Primary {
                        lo: Bound::Included(v),
                        hi: Bound::Included(v),
                    }
                }
                CmpOp::Gt => lo = tighter_lo(lo, Bound::Excluded(v)),
                CmpOp::Ge => lo = tighter_lo(lo, Bound::Included(v)),
                CmpOp::Lt => hi = tighter_hi(hi, Bound::Excluded(v)),
                CmpOp::Le => hi = tighter_hi(hi, Bound::Included(v)),
            }
        }

        let mut best: Option<(usize, usize, usize)> = None; // (score, pos, ncols)
        for (pos, idx) in t.indices.iter().enumerate() {
            let mut eq_len = 0;
            for col in &idx.spec.columns {
                if pred.terms.iter().any(|t| &t.column == col && t.op == CmpOp::Eq) {
                    eq_len += 1;
                } else {
                    break;
                }
            }
            let has_range = idx.spec.columns.get(eq_len).is_some_and(|col| {
                pred.terms.iter().any(|t| &t.column == col && t.op.is_range())
            });
            if eq_len == 0 && !has_range {
                continue;
            }
            let score = eq_len * 2 + usize::from(has_range);
            let ncols = idx.spec.columns.len();
            let better = match best {
                None => true,
                Some((s, _, n)) => score > s || (score == s && ncols < n),
            };
            if better {
                best = Some((score, pos, ncols));
            }
        }
        if let Some((_, pos, _)) = best {
            let idx = &t.indices[pos];
            let mut eq = Vec::new();
            for col in &idx.spec.columns {
                match pred.terms.iter().find(|t| &t.column == col && t.op == CmpOp::Eq) {
                    Some(term) => eq.push(term.value.clone()),
                    None => break,
                }
            }
            let range = idx.spec.columns.get(eq.len()).and_then(|col| {
                pred.terms
                    .iter()
                    .find(|t| &t.column == col && t.op.is_range())
                    .map(|t| (t.op, t.value.clone()))
            });
            return Access::Index { pos, eq, range };
        }
        if rowid_terms > 0 {
            return Access::Primary { lo, hi };
        }
        if let Some(pos) = t
            .indices
            .iter()
            .position(|idx| Self::covers(idx, pred, proj))
        {
            return Access::IndexOnly { pos };
        }
        Access::Full
    }

    fn covers(idx: &Index, pred: &Predicate, proj: &Projection) -> bool {
        let Projection::Columns(cols) = proj else {
            return false;
        };
        let has = |c: &str| c == ROWID || idx.spec.columns.iter().any(|ic| ic == c);
        cols.iter().all(|c| has(c)) && pred.columns().all(has)
    }

    /// Rowids produced by the chosen access path, before residual filtering.
    fn candidates(t: &Table, access: &Access) -> Vec<RowId> {
        match access {
            Access::Full => t.rows.keys().copied().collect(),
            Access::Primary { lo, hi } => {
                if bounds_empty(lo, hi) {
                    return Vec::new();
                }
                t.rows.range((*lo, *hi)).map(|(r, _)| *r).collect()
            }
            Access::IndexOnly { pos } => t.indices[*pos].entries.iter().map(|(_, r)| *r).collect(),
            Access::Index { pos, eq, range } => {
                let idx = &t.indices[*pos];
                let n = eq.len();
                let mut start = eq.clone();
                if let Some((CmpOp::Gt | CmpOp::Ge, v)) = range {
                    start.push(v.clone());
                }
                idx.entries
                    .range((Bound::Included((start, 0)), Bound::Unbounded))
                    .take_while(|(key, _)| key[..n] == eq[..])
                    .skip_while(|(key, _)| matches!(range, Some((CmpOp::Gt, v)) if &key[n] == v))
                    .take_while(|(key, _)| match range {
                        Some((op @ (CmpOp::Lt | CmpOp::Le), v)) => op.holds(&key[n], v),
                        _ => true,
                    })
                    .map(|(_, r)| *r)
                    .collect()
            }
        }
    }

    fn scan(
        &self,
        id: TableId,
        pred: &Predicate,
        proj: &Projection,
    ) -> Result<(Vec<RowId>, ScanStats), StoreError> {
        self.scan_grouped(id, pred, proj, None)
    }

    /// `grouped` maps the matched rowids to the number of output rows when it
    /// differs from the match count (aggregates).
    fn scan_grouped(
        &self,
        id: TableId,
        pred: &Predicate,
        proj: &Projection,
        grouped: Option<&dyn Fn(&[RowId]) -> u64>,
    ) -> Result<(Vec<RowId>, ScanStats), StoreError> {
        let t = self.table(id)?;
        let positions = pred
            .terms
            .iter()
            .map(|term| Self::resolve_column(t, &term.column))
            .collect::<Result<Vec<_>, _>>()?;
        if let Projection::Columns(cols) = proj {
            for c in cols {
                Self::resolve_column(t, c)?;
            }
        }
        let access = Self::plan(t, pred, proj);
        let mut candidates = Self::candidates(t, &access);
        if matches!(access, Access::Index { .. } | Access::IndexOnly { .. }) {
            candidates.sort_unstable();
        }
        let matched: Vec<RowId> = candidates
            .iter()
            .copied()
            .filter(|r| Self::row_matches(&positions, pred, *r, &t.rows[r]))
            .collect();
        let n = t.rows.len();
        let returned = grouped.map_or(matched.len() as u64, |g| g(&matched));
        let stats = match &access {
            Access::Full => ScanStats {
                rows_scanned: n as u64,
                rows_returned: returned,
                index_used: None,
                covering: false,
            },
            Access::Primary { .. } => ScanStats {
                rows_scanned: (candidates.len() as u64 + log2_descent(n)).min(n as u64),
                rows_returned: returned,
                index_used: Some("PRIMARY".to_owned()),
                covering: false,
            },
            Access::Index { pos, .. } => {
                let idx = &t.indices[*pos];
                ScanStats {
                    rows_scanned: (candidates.len() as u64 + log2_descent(n)).min(n as u64),
                    rows_returned: returned,
                    index_used: Some(idx.spec.name.clone()),
                    covering: Self::covers(idx, pred, proj),
                }
            }
            Access::IndexOnly { pos } => {
                let weighted = (n as f64 * self.covering_factor).ceil() as u64;
                ScanStats {
                    rows_scanned: weighted.max(returned).min(n as u64),
                    rows_returned: returned,
                    index_used: Some(t.indices[*pos].spec.name.clone()),
                    covering: true,
                }
            }
        };
        Ok((matched, stats))
    }

    fn project(t: &Table, rowid: RowId, row: &Row, proj: &Projection) -> Row {
        match proj {
            Projection::All => row.clone(),
            Projection::Columns(cols) => cols
                .iter()
                .map(|c| match t.schema.position(c) {
                    Some(p) => row[p].clone(),
                    None => Value::Int(rowid as i64),
                })
                .collect(),
        }
    }

    pub fn select(
        &self,
        id: TableId,
        pred: &Predicate,
        proj: &Projection,
    ) -> Result<Selection, StoreError> {
        let (matched, stats) = self.scan(id, pred, proj)?;
        let t = self.table(id)?;
        let rows = matched
            .into_iter()
            .map(|r| (r, Self::project(t, r, &t.rows[&r], proj)))
            .collect();
        Ok(Selection { rows, stats })
    }

    /// `SELECT group_col, SUM(sum_col) ... GROUP BY group_col`.
    pub fn group_sum(
        &self,
        id: TableId,
        pred: &Predicate,
        group_col: &str,
        sum_col: &str,
    ) -> Result<(BTreeMap<Value, i64>, ScanStats), StoreError> {
        let proj = Projection::columns([group_col, sum_col]);
        let t = self.table(id)?;
        let g = Self::resolve_column(t, group_col)?;
        let s = Self::resolve_column(t, sum_col)?;
        let key_of = |r: RowId| g.map_or(Value::Int(r as i64), |p| t.rows[&r][p].clone());
        let count_groups = |rows: &[RowId]| {
            rows.iter().map(|r| key_of(*r)).collect::<std::collections::BTreeSet<_>>().len() as u64
        };
        let (matched, mut stats) = self.scan_grouped(id, pred, &proj, Some(&count_groups))?;
        let mut out = BTreeMap::new();
        for r in matched {
            let row = &t.rows[&r];
            let key = key_of(r);
            let add = s.map_or(r as i64, |p| row[p].as_int().unwrap_or(0));
            *out.entry(key).or_insert(0) += add;
        }
        stats.rows_returned = out.len() as u64;
        Ok((out, stats))
    }

    pub fn update(
        &mut self,
        id: TableId,
        owner: OwnerId,
        pred: &Predicate,
        assignments: &[(&str, Value)],
    ) -> Result<(usize, ScanStats), StoreError> {
        {
            let t = self.table(id)?;
            Self::check_writable(t, owner)?;
        }
        let (matched, stats) = self.scan(id, pred, &Projection::All)?;
        let t = self.table_mut(id)?;
        let mut resolved = Vec::with_capacity(assignments.len());
        for (col, v) in assignments {
            let Some(p) = t.schema.position(col) else {
                return Err(StoreError::UnknownColumn {
                    table: t.schema.name.clone(),
                    column: (*col).to_owned(),
                });
            };
            if !v.fits(t.schema.columns[p].kind) {
                return Err(StoreError::SchemaMismatch {
                    table: t.schema.name.clone(),
                    reason: format!("column `{col}` cannot hold {v}"),
                });
            }
            resolved.push((p, v.clone()));
        }
        for &r in &matched {
            let old = t.rows[&r].clone();
            let mut new = old.clone();
            for (p, v) in &resolved {
                new[*p] = v.clone();
            }
            for idx in &mut t.indices {
                let (ok, nk) = (idx.key(&old), idx.key(&new));
                if ok != nk {
                    idx.entries.remove(&(ok, r));
                    idx.entries.insert((nk, r));
                }
            }
            t.rows.insert(r, new);
        }
        if !self.write_logs.is_empty() {
            for &r in &matched {
                let row = self.tables[&id].rows[&r].clone();
                self.log_write(id, r, &row);
            }
        }
        Ok((matched.len(), stats))
    }

    pub fn max_rowid_matching(
        &self,
        id: TableId,
        pred: &Predicate,
    ) -> Result<(Option<RowId>, ScanStats), StoreError> {
        let (matched, stats) = self.scan(id, pred, &Projection::All)?;
        Ok((matched.into_iter().max(), stats))
    }

    fn validate_index(t: &Table, spec: &IndexSpec) -> Result<Vec<usize>, StoreError> {
        if !schema::is_identifier(&spec.name) || spec.columns.is_empty() {
            return Err(StoreError::InvalidSchema(format!("bad index spec `{}`", spec.name)));
        }
        let positions = spec
            .columns
            .iter()
            .map(|c| {
                t.schema.position(c).ok_or_else(|| StoreError::UnknownColumn {
                    table: t.schema.name.clone(),
                    column: c.clone(),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        if t
            .indices
            .iter()
            .any(|i| i.spec.columns == spec.columns || i.spec.name == spec.name)
        {
            return Err(StoreError::DuplicateIndex {
                table: t.schema.name.clone(),
                columns: spec.columns.join(","),
            });
        }
        Ok(positions)
    }

    /// Adds an index without any locking; used when a table is being set up
    /// or is not yet visible to writers (e.g. a fresh copy table).
    pub fn add_index(&mut self, id: TableId, spec: IndexSpec) -> Result<(), StoreError> {
        let t = self.table_mut(id)?;
        let positions = Self::validate_index(t, &spec)?;
        let mut idx = Index {
            spec,
            positions,
            entries: BTreeSet::new(),
        };
        for (r, row) in &t.rows {
            let key = idx.key(row);
            idx.entries.insert((key, *r));
        }
        t.indices.push(idx);
        Ok(())
    }

    pub fn drop_index(&mut self, id: TableId, name: &str) -> Result<IndexSpec, StoreError> {
        let t = self.table_mut(id)?;
        let pos = t
            .indices
            .iter()
            .position(|i| i.spec.name == name)
            .ok_or_else(|| StoreError::UnknownIndex {
                table: t.schema.name.clone(),
                index: name.to_owned(),
            })?;
        Ok(t.indices.remove(pos).spec)
    }

    /// Starts a locking index build: takes the exclusive table lock for
    /// `owner`. The index becomes visible in [`Store::finish_index_build`].
    pub fn begin_index_build(
        &mut self,
        id: TableId,
        spec: IndexSpec,
        owner: OwnerId,
        now: f64,
    ) -> Result<IndexBuild, StoreError> {
        {
            let t = self.table(id)?;
            Self::validate_index(t, &spec)?;
        }
        self.lock_table(id, owner, now)?;
        let duration_rows = self.len(id)? as u64;
        Ok(IndexBuild {
            table: id,
            spec,
            owner,
            duration_rows,
        })
    }

    pub fn finish_index_build(&mut self, build: IndexBuild) -> Result<(), StoreError> {
        let result = self.add_index(build.table, build.spec);
        self.unlock_table(build.table, build.owner)?;
        result
    }

    /// Locking build completed in one step (no simulated time passes).
    pub fn create_index(
        &mut self,
        id: TableId,
        spec: IndexSpec,
        owner: OwnerId,
        now: f64,
    ) -> Result<IndexBuild, StoreError> {
        let build = self.begin_index_build(id, spec, owner, now)?;
        let report = build.clone();
        self.finish_index_build(build)?;
        Ok(report)
    }

    fn check_renamable(&self, id: TableId, name: &str) -> Result<(), StoreError> {
        let t = &self.tables[&id];
        if let Some(lock) = t.lock {
            return Err(StoreError::Locked {
                table: name.to_owned(),
                holder: lock.holder,
            });
        }
        if !t.writers.is_empty() {
            return Err(StoreError::WritersActive {
                table: name.to_owned(),
            });
        }
        Ok(())
    }

    pub fn rename_table(&mut self, old: &str, new: &str) -> Result<(), StoreError> {
        self.rename_tables(&[(old, new)])
    }

    /// Applies a sequence of renames atomically: either every rename in the
    /// batch succeeds or the store is unchanged. Later renames may reuse a
    /// name freed by an earlier one.
    pub fn rename_tables(&mut self, batch: &[(&str, &str)]) -> Result<(), StoreError> {
        let mut names = self.names.clone();
        for (old, new) in batch {
            let id = *names
                .get(*old)
                .ok_or_else(|| StoreError::NoSuchTable((*old).to_owned()))?;
            self.check_renamable(id, old)?;
            if !schema::is_identifier(new) {
                return Err(StoreError::InvalidSchema(format!("`{new}` is not a valid table name")));
            }
            if names.contains_key(*new) {
                return Err(StoreError::DuplicateTable((*new).to_owned()));
            }
            names.remove(*old);
            names.insert((*new).to_owned(), id);
        }
        for (name, id) in &names {
            self.tables.get_mut(id).expect("live id").schema.name = name.clone();
        }
        self.names = names;
        Ok(())
    }

    /// Exchanges the names of two tables in one atomic batch.
    pub fn swap_tables(&mut self, a: &str, b: &str) -> Result<(), StoreError> {
        let tmp = format!("{a}__swap");
        self.rename_tables(&[(a, tmp.as_str()), (b, a), (tmp.as_str(), b)])
    }

    /// `INSERT INTO dst SELECT * FROM src WHERE rowid IN range`, keeping rowids.
    pub fn copy_rows(
        &mut self,
        src: TableId,
        dst: TableId,
        range: impl RangeBounds<RowId>,
        owner: OwnerId,
    ) -> Result<usize, StoreError> {
        let range = (range.start_bound().cloned(), range.end_bound().cloned());
        let rows: Vec<(RowId, Row)> = {
            let s = self.table(src)?;
            let d = self.table(dst)?;
            if !s.schema.same_columns(&d.schema) {
                return Err(StoreError::SchemaMismatch {
                    table: d.schema.name.clone(),
                    reason: format!("columns differ from `{}`", s.schema.name),
                });
            }
            Self::check_writable(d, owner)?;
            if bounds_empty(&range.0, &range.1) {
                return Ok(0);
            }
            let rows: Vec<_> = s.rows.range(range).map(|(r, row)| (*r, row.clone())).collect();
            if let Some((r, _)) = rows.iter().find(|(r, _)| d.rows.contains_key(r)) {
                return Err(StoreError::RowidCollision {
                    table: d.schema.name.clone(),
                    rowid: *r,
                });
            }
            rows
        };
        let d = self.table_mut(dst)?;
        for (r, row) in &rows {
            for idx in &mut d.indices {
                let key = idx.key(row);
                idx.entries.insert((key, *r));
            }
            d.rows.insert(*r, row.clone());
            d.next_rowid = d.next_rowid.max(r + 1);
        }
        Ok(rows.len())
    }

    /// Inserts a row with an explicit rowid (snapshot loading).
    pub(crate) fn insert_with_rowid(
        &mut self,
        id: TableId,
        rowid: RowId,
        row: Row,
    ) -> Result<(), StoreError> {
        let t = self.table_mut(id)?;
        Self::check_row(t, &row)?;
        if t.rows.contains_key(&rowid) {
            return Err(StoreError::RowidCollision {
                table: t.schema.name.clone(),
                rowid,
            });
        }
        for idx in &mut t.indices {
            let key = idx.key(&row);
            idx.entries.insert((key, rowid));
        }
        t.rows.insert(rowid, row);
        t.next_rowid = t.next_rowid.max(rowid + 1);
        Ok(())
    }
}

fn tighter_lo(a: Bound<RowId>, b: Bound<RowId>) -> Bound<RowId> {
    let key = |x: &Bound<RowId>| match x {
        Bound::Unbounded => (0, 0),
        Bound::Included(v) => (*v, 0),
        Bound::Excluded(v) => (*v, 1),
    };
    if key(&b) > key(&a) {
        b
    } else {
        a
    }
}

fn tighter_hi(a: Bound<RowId>, b: Bound<RowId>) -> Bound<RowId> {
    let key = |x: &Bound<RowId>| match x {
        Bound::Unbounded => (RowId::MAX, 2),
        Bound::Included(v) => (*v, 1),
        Bound::Excluded(v) => (*v, 0),
    };
    if key(&b) < key(&a) {
        b
    } else {
        a
    }
}

fn bounds_empty(lo: &Bound<RowId>, hi: &Bound<RowId>) -> bool {
    match (lo, hi) {
        (Bound::Included(a), Bound::Included(b)) => a > b,
        (Bound::Included(a), Bound::Excluded(b))
        | (Bound::Excluded(a), Bound::Included(b))
        | (Bound::Excluded(a), Bound::Excluded(b)) => a >= b,
        _ => false,
    }
}
