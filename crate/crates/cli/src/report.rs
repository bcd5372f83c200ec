//! Report files: a deterministic JSON summary, CSV tables for plotting and a
//! separate metadata file for anything run-dependent.

use std::io;
use std::path::Path;

use serde::Serialize;
use serde_json::{Map, Value};

/// One declared tolerance and whether it held.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub pass: bool,
}

impl Check {
    pub fn at_most(name: &str, value: f64, tolerance: f64) -> Self {
        Check {
            name: name.to_string(),
            value,
            tolerance,
            pass: value <= tolerance,
        }
    }
}

/// A CSV table; written with its header even when `rows` is empty.
#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub file: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(file: &str, header: Vec<String>) -> Self {
        Table {
            file: file.to_string(),
            header,
            rows: Vec::new(),
        }
    }
}

/// Numbered column names `prefix1..prefixn`.
pub fn columns(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("{prefix}{i}")).collect()
}

#[derive(Clone, Debug, Default)]
pub struct Report {
    pub fields: Map<String, Value>,
    pub checks: Vec<Check>,
    pub tables: Vec<Table>,
}

impl Report {
    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).expect("report values serialize");
        self.fields.insert(key.to_string(), v);
    }

    pub fn check(&mut self, check: Check) {
        self.set(&check.name, check.value);
        self.checks.push(check);
    }

    pub fn first_failure(&self) -> Option<&Check> {
        self.checks.iter().find(|c| !c.pass)
    }

    pub fn summary(&self, pipeline: &str) -> Value {
        let mut map = self.fields.clone();
        map.insert("pipeline".into(), Value::String(pipeline.into()));
        map.insert(
            "checks".into(),
            serde_json::to_value(&self.checks).expect("checks serialize"),
        );
        map.insert("pass".into(), Value::Bool(self.first_failure().is_none()));
        Value::Object(map)
    }

    pub fn write(&self, dir: &Path, pipeline: &str) -> io::Result<()> {
        std::fs::create_dir_all(dir)?;
        let text =
            serde_json::to_string_pretty(&self.summary(pipeline)).map_err(io::Error::other)?;
        std::fs::write(dir.join("summary.json"), text + "\n")?;
        for table in &self.tables {
            write_csv(&dir.join(&table.file), table)?;
        }
        Ok(())
    }
}

pub fn write_csv(path: &Path, table: &Table) -> io::Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(&table.header)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|v| v.to_string()))?;
    }
    w.flush()
}
