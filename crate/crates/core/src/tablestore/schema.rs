use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use super::value::ColumnKind;
use super::StoreError;

/// Name of the implicit, monotonically assigned row identifier. It can be
/// used in predicates but is not part of the declared column list.
pub const ROWID: &str = "rowid";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableSchema {
    pub name: String,
    pub columns: Vec<Column>,
}

impl TableSchema {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            columns: Vec::new(),
        }
    }

    pub fn column(mut self, name: impl Into<String>, kind: ColumnKind) -> Self {
        self.columns.push(Column {
            name: name.into(),
            kind,
        });
        self
    }

    pub fn position(&self, column: &str) -> Option<usize> {
        self.columns.iter().position(|c| c.name == column)
    }

    /// Same column list under a different table name (`CREATE TABLE .. LIKE ..`).
    pub fn renamed(&self, name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            columns: self.columns.clone(),
        }
    }

    pub fn same_columns(&self, other: &TableSchema) -> bool {
        self.columns == other.columns
    }

    pub(crate) fn validate(&self) -> Result<(), StoreError> {
        if !is_identifier(&self.name) {
            return Err(StoreError::InvalidSchema(format!(
                "`{}` is not a valid table name",
                self.name
            )));
        }
        let mut seen = HashSet::new();
        for c in &self.columns {
            if !is_identifier(&c.name) || c.name == ROWID {
                return Err(StoreError::InvalidSchema(format!(
                    "`{}` is not a valid column name",
                    c.name
                )));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(StoreError::InvalidSchema(format!(
                    "duplicate column `{}` in `{}`",
                    c.name, self.name
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexSpec {
    pub name: String,
    pub columns: Vec<String>,
}

impl IndexSpec {
    pub fn new<I, S>(name: impl Into<String>, columns: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            name: name.into(),
            columns: columns.into_iter().map(Into::into).collect(),
        }
    }

    /// Parses `name:col,col`.
    pub fn parse(s: &str) -> Option<Self> {
        let (name, cols) = s.split_once(':')?;
        let columns: Vec<String> = cols
            .split(',')
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .map(str::to_owned)
            .collect();
        if !is_identifier(name) || columns.is_empty() {
            return None;
        }
        Some(Self::new(name, columns))
    }
}

pub(crate) fn is_identifier(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}
