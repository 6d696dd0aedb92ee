//! Result records: a CSV table plus a JSON summary per run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{LabError, Result};

/// One CSV field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Int(i64),
    Float(f64),
    Bool(bool),
    Text(String),
    Missing,
}

impl Cell {
    /// Floats carry 17 significant digits so they round-trip exactly.
    pub fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) => format!("{x:.16e}"),
            Cell::Bool(b) => b.to_string(),
            Cell::Text(s) => s.clone(),
            Cell::Missing => String::new(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(x) => Some(*x),
            _ => None,
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as i64)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

/// Name of the trailing status column: `ok` or `error: <reason>`.
pub const STATUS: &str = "status";

/// Everything one run produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub config_hash: String,
    pub experiment: String,
    pub created_at: String,
    pub tool_version: String,
    pub rng_algorithm: String,
    /// Canonical config text the hash was taken over.
    pub config: String,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
    pub summary: BTreeMap<String, Cell>,
    pub failed_cells: usize,
}

impl ResultRecord {
    pub fn column(&self, name: &str) -> Result<usize> {
        self.columns
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| LabError::MissingColumn(name.into()))
    }

    /// Rows whose status is `ok`.
    pub fn ok_rows(&self) -> impl Iterator<Item = &Vec<Cell>> {
        let status = self.columns.iter().position(|c| c == STATUS);
        self.rows
            .iter()
            .filter(move |r| status.is_none_or(|k| matches!(&r[k], Cell::Text(s) if s == "ok")))
    }

    /// The CSV payload: header plus rows, independent of timestamps.
    pub fn csv_bytes(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns)?;
        for row in &self.rows {
            w.write_record(row.iter().map(Cell::render))?;
        }
        w.into_inner().map_err(|e| LabError::Io(e.into_error()))
    }

    /// Directory name `<experiment>-<first 12 hex digits of the hash>`.
    pub fn dir_name(&self) -> String {
        format!(
            "{}-{}",
            self.experiment,
            &self.config_hash[..12.min(self.config_hash.len())]
        )
    }

    /// Writes `results.csv` and `record.json` under `root/<dir_name>` and
    /// returns the record path.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(self.dir_name());
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("results.csv"), self.csv_bytes()?)?;
        let path = dir.join("record.json");
        std::fs::write(&path, serde_json::to_string_pretty(self)?)?;
        Ok(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}
