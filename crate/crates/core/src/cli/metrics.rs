//! Run artefacts: the JSON-lines metrics stream, the policy file, the
//! policy-evolution table and the sweep table.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::augment::OpKind;
use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PolicySnapshot};
use crate::trainloop::EpochRecord;

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const POLICY_FILE: &str = "policy.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const CONFIG_FILE: &str = "config.toml";
pub const SWEEP_FILE: &str = "sweep.csv";
pub const EVOLUTION_FILE: &str = "policy_evolution.csv";

/// Appends one JSON object per epoch, flushed immediately so the file stays
/// valid line by line even if the run dies.
pub struct MetricsWriter {
    path: PathBuf,
    out: BufWriter<File>,
    last_epoch: Option<usize>,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
            last_epoch: None,
        })
    }

    pub fn write(&mut self, record: &EpochRecord) -> Result<()> {
        if self.last_epoch.is_some_and(|e| record.epoch <= e) {
            return Err(Error::InvalidInput(format!(
                "epoch {} written after epoch {}",
                record.epoch,
                self.last_epoch.unwrap_or(0)
            )));
        }
        serde_json::to_writer(&mut self.out, record)?;
        self.out.write_all(b"\n").map_err(|e| Error::io(&self.path, e))?;
        self.out.flush().map_err(|e| Error::io(&self.path, e))?;
        self.last_epoch = Some(record.epoch);
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EpochRecord = serde_json::from_str(&line).map_err(|e| Error::from(e).context(format!("{} line {}", path.display(), i + 1)))?;
        records.push(rec);
    }
    Ok(records)
}

/// Contents of `policy.json`: raw parameters plus their effective values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyFile {
    pub params: PolicyParams,
    pub effective: PolicySnapshot,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// One row of `policy_evolution.csv`. `mu` is empty for magnitude-free ops.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionRow {
    pub epoch: usize,
    pub stage: usize,
    pub op: String,
    pub pi: f64,
    pub p: f64,
    pub mu: Option<f64>,
}

pub fn evolution_rows(records: &[EpochRecord]) -> Vec<EvolutionRow> {
    let mut rows = Vec::new();
    for rec in records {
        for (stage, snap) in rec.policy_snapshot.stages.iter().enumerate() {
            for kind in OpKind::ALL {
                rows.push(EvolutionRow {
                    epoch: rec.epoch,
                    stage,
                    op: kind.name().to_string(),
                    pi: snap.pi[kind.index()],
                    p: snap.p[kind.index()],
                    mu: snap.mu_of(kind),
                });
            }
        }
    }
    rows
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other:?}", path.display())),
    }
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    for row in rows {
        w.serialize(row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_error(path, e))).collect()
}

/// One row of `sweep.csv`. Failed runs leave the measurements empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param_value: String,
    pub seed: u64,
    pub final_test_error: Option<f64>,
    /// Largest tape of any training or policy step in the run.
    pub peak_memory_proxy: Option<usize>,
}
