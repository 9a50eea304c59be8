//! Table data model and the flat text serialization fed to the model.
//!
//! Coordinates are zero-indexed into the data rows; the header row is not
//! addressable. A [`CellRef`] carries signed components because model output
//! can contain negative coordinates, which are simply out of bounds.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TableError {
    #[error("table must have at least one column")]
    NoColumns,
    #[error("row {row} has {found} cells, expected {expected}")]
    Ragged {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("cell {0} is out of bounds for a {1}x{2} table")]
    OutOfBounds(CellRef, usize, usize),
}

/// A `[row, col]` coordinate into a table's data grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "[i64; 2]", into = "[i64; 2]")]
pub struct CellRef {
    pub row: i64,
    pub col: i64,
}

impl CellRef {
    pub fn new(row: i64, col: i64) -> Self {
        Self { row, col }
    }
}

impl From<[i64; 2]> for CellRef {
    fn from([row, col]: [i64; 2]) -> Self {
        Self { row, col }
    }
}

impl From<CellRef> for [i64; 2] {
    fn from(c: CellRef) -> Self {
        [c.row, c.col]
    }
}

impl fmt::Display for CellRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}]", self.row, self.col)
    }
}

/// A rectangular table of string cells. Immutable once constructed.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTable")]
pub struct Table {
    headers: Vec<String>,
    rows: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawTable {
    headers: Vec<String>,
    #[serde(default)]
    rows: Vec<Vec<String>>,
}

impl TryFrom<RawTable> for Table {
    type Error = TableError;

    fn try_from(raw: RawTable) -> Result<Self, Self::Error> {
        Table::new(raw.headers, raw.rows)
    }
}

impl Table {
    pub fn new(headers: Vec<String>, rows: Vec<Vec<String>>) -> Result<Self, TableError> {
        if headers.is_empty() {
            return Err(TableError::NoColumns);
        }
        let expected = headers.len();
        if let Some((row, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != expected) {
            return Err(TableError::Ragged {
                row,
                expected,
                found: r.len(),
            });
        }
        Ok(Self { headers, rows })
    }

    /// Convenience constructor from string slices.
    pub fn from_strs(headers: &[&str], rows: &[&[&str]]) -> Result<Self, TableError> {
        Self::new(
            headers.iter().map(|s| s.to_string()).collect(),
            rows.iter()
                .map(|r| r.iter().map(|s| s.to_string()).collect())
                .collect(),
        )
    }

    pub fn headers(&self) -> &[String] {
        &self.headers
    }

    pub fn rows(&self) -> &[Vec<String>] {
        &self.rows
    }

    /// `(rows, cols)`.
    pub fn dims(&self) -> (usize, usize) {
        (self.rows.len(), self.headers.len())
    }

    pub fn in_bounds(&self, cell: CellRef) -> bool {
        let (r, c) = self.dims();
        cell.row >= 0 && cell.col >= 0 && (cell.row as u64) < r as u64 && (cell.col as u64) < c as u64
    }

    pub fn cell_value(&self, cell: CellRef) -> Result<&str, TableError> {
        if !self.in_bounds(cell) {
            let (r, c) = self.dims();
            return Err(TableError::OutOfBounds(cell, r, c));
        }
        Ok(&self.rows[cell.row as usize][cell.col as usize])
    }

    /// Linearizes the table as
    /// `[HEADER] h1 | h2 [ROW 0] v1 | v2 [ROW 1] ...`.
    ///
    /// Cell text is written verbatim. A cell containing ` | ` or `[ROW`
    /// makes the output ambiguous; the format has no escaping and is not
    /// meant to be parsed back.
    pub fn serialize(&self) -> String {
        let mut out = String::from("[HEADER] ");
        out.push_str(&self.headers.join(" | "));
        for (i, row) in self.rows.iter().enumerate() {
            out.push_str(&format!(" [ROW {i}] "));
            out.push_str(&row.join(" | "));
        }
        out
    }
}
