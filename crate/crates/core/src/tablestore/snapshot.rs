//! Line-oriented store snapshots.
//!
//! ```text
//! TABLE <name> <col>:<kind>,<col>:<kind>,...
//! <rowid>\t<value>\t<value>...
//! INDEX <table> <name> <col>,<col>
//! ```
//!
//! Rows follow their `TABLE` header; `INDEX` lines follow the rows. Values
//! are written as integers, shortest round-trip decimal timestamps, or text
//! with `\\`, `\t`, `\n` and `\r` escaped. `\N` is NULL. UTF-8, LF endings.

use std::fmt::Write as _;
use std::io::{self, BufRead, Write};

use thiserror::Error;

use super::{ColumnKind, IndexSpec, Store, StoreError, TableSchema, Value};

#[derive(Debug, Error)]
pub enum SnapshotError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {source}")]
    Store { line: usize, source: StoreError },
    #[error(transparent)]
    Io(#[from] io::Error),
}

fn escape(s: &str, out: &mut String) {
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            c => out.push(c),
        }
    }
}

fn unescape(s: &str) -> Option<String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next()? {
            '\\' => out.push('\\'),
            't' => out.push('\t'),
            'n' => out.push('\n'),
            'r' => out.push('\r'),
            _ => return None,
        }
    }
    Some(out)
}

fn encode_value(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("\\N"),
        Value::Int(i) => {
            let _ = write!(out, "{i}");
        }
        Value::Time(t) => {
            let _ = write!(out, "{t:?}");
        }
        Value::Text(s) => escape(s, out),
    }
}

fn decode_value(field: &str, kind: ColumnKind) -> Option<Value> {
    if field == "\\N" {
        return Some(Value::Null);
    }
    match kind {
        ColumnKind::Integer => field.parse().ok().map(Value::Int),
        ColumnKind::Timestamp => field.parse::<f64>().ok().filter(|t| t.is_finite()).map(Value::Time),
        ColumnKind::Text => unescape(field).map(Value::Text),
    }
}

pub fn write_snapshot<W: Write>(store: &Store, mut w: W) -> io::Result<()> {
    let mut buf = String::new();
    for name in store.table_names() {
        let id = store.table_id(name).expect("listed table");
        let schema = store.schema(id).expect("listed table");
        buf.clear();
        let cols: Vec<String> = schema
            .columns
            .iter()
            .map(|c| format!("{}:{}", c.name, c.kind.as_str()))
            .collect();
        let _ = writeln!(buf, "TABLE {} {}", schema.name, cols.join(","));
        w.write_all(buf.as_bytes())?;
        for (rowid, row) in store.rows(id).expect("listed table") {
            buf.clear();
            let _ = write!(buf, "{rowid}");
            for v in row {
                buf.push('\t');
                encode_value(v, &mut buf);
            }
            buf.push('\n');
            w.write_all(buf.as_bytes())?;
        }
        for spec in store.indices(id).expect("listed table") {
            writeln!(w, "INDEX {} {} {}", schema.name, spec.name, spec.columns.join(","))?;
        }
    }
    Ok(())
}

pub fn read_snapshot<R: BufRead>(r: R) -> Result<Store, SnapshotError> {
    let mut store = Store::new();
    let mut current: Option<(super::TableId, Vec<ColumnKind>)> = None;
    for (i, line) in r.lines().enumerate() {
        let line_no = i + 1;
        let line = line?;
        let perr = |message: String| SnapshotError::Parse {
            line: line_no,
            message,
        };
        let serr = |source| SnapshotError::Store {
            line: line_no,
            source,
        };
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("TABLE ") {
            let (name, cols) = rest.split_once(' ').unwrap_or((rest, ""));
            let mut schema = TableSchema::new(name);
            for col in cols.split(',').filter(|c| !c.is_empty()) {
                let (cname, kind) = col
                    .split_once(':')
                    .ok_or_else(|| perr(format!("column `{col}` lacks a kind")))?;
                let kind = ColumnKind::parse(kind)
                    .ok_or_else(|| perr(format!("unknown column kind `{kind}`")))?;
                schema = schema.column(cname, kind);
            }
            let kinds = schema.columns.iter().map(|c| c.kind).collect();
            let id = store.create_table(schema).map_err(serr)?;
            current = Some((id, kinds));
        } else if let Some(rest) = line.strip_prefix("INDEX ") {
            let parts: Vec<&str> = rest.split(' ').collect();
            let [table, name, cols] = parts[..] else {
                return Err(perr("INDEX line needs <table> <name> <columns>".into()));
            };
            let id = store.table_id(table).map_err(serr)?;
            let spec = IndexSpec::new(name, cols.split(','));
            store.add_index(id, spec).map_err(serr)?;
        } else {
            let (id, kinds) = current
                .as_ref()
                .ok_or_else(|| perr("row before any TABLE header".into()))?;
            let mut fields = line.split('\t');
            let rowid: u64 = fields
                .next()
                .and_then(|f| f.parse().ok())
                .ok_or_else(|| perr("row does not start with a rowid".into()))?;
            let values: Vec<&str> = fields.collect();
            if values.len() != kinds.len() {
                return Err(perr(format!(
                    "expected {} values, found {}",
                    kinds.len(),
                    values.len()
                )));
            }
            let row = values
                .iter()
                .zip(kinds)
                .map(|(f, k)| {
                    decode_value(f, *k).ok_or_else(|| perr(format!("bad {} value `{f}`", k.as_str())))
                })
                .collect::<Result<Vec<_>, _>>()?;
            store.insert_with_rowid(*id, rowid, row).map_err(serr)?;
        }
    }
    Ok(store)
}

pub fn save(store: &Store, path: &std::path::Path) -> io::Result<()> {
    let f = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(f);
    write_snapshot(store, &mut w)?;
    w.flush()
}

pub fn load(path: &std::path::Path) -> Result<Store, SnapshotError> {
    let f = std::fs::File::open(path)?;
    read_snapshot(io::BufReader::new(f))
}
