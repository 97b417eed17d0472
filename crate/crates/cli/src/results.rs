//! Long-format results table shared by `run`, `report` and `verify`.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const RESULTS_FILE: &str = "results.csv";

/// One metric value. `task` is one-based; whole-run metrics use the last task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    #[serde(rename = "T")]
    pub num_tasks: usize,
    pub seed: u64,
    pub task: usize,
    pub metric: String,
    #[serde(serialize_with = "fixed6")]
    pub value: f64,
}

fn fixed6<S: serde::Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(&format!("{v:.6}"))
}

impl ResultRow {
    pub fn new(method: &str, num_tasks: usize, seed: u64, task: usize, metric: impl Into<String>, value: f64) -> Self {
        Self { method: method.to_string(), num_tasks, seed, task, metric: metric.into(), value }
    }

    fn sort_key(&self) -> (String, u64, String, usize) {
        (self.method.clone(), self.seed, self.metric.clone(), self.task)
    }
}

/// Rows sorted by method, seed, metric and task.
pub fn sorted(mut rows: Vec<ResultRow>) -> Vec<ResultRow> {
    rows.sort_by_key(ResultRow::sort_key);
    rows
}

pub fn to_csv_bytes(rows: &[ResultRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(w.into_inner()?)
}

pub fn write_results(dir: &Path, rows: &[ResultRow]) -> Result<String> {
    let bytes = to_csv_bytes(rows)?;
    let path = dir.join(RESULTS_FILE);
    std::fs::write(&path, &bytes).with_context(|| format!("writing {}", path.display()))?;
    Ok(sha256_hex(&bytes))
}

pub fn read_results(dir: &Path) -> Result<Vec<ResultRow>> {
    let path = dir.join(RESULTS_FILE);
    let mut r = csv::Reader::from_path(&path).with_context(|| format!("opening {}", path.display()))?;
    r.deserialize()
        .map(|row| row.with_context(|| format!("parsing {}", path.display())))
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
