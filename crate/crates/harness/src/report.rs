//! CSV and JSON output.
//!
//! A run directory holds:
//! - `steps.csv`: one row per process stamp with truth, newest estimate,
//!   real-time (propagated) estimate and its errors; empty cells before the
//!   first state exists.
//! - `estimates.csv`: the delayed estimate of every state.
//! - `estimates.ndjson`: the estimate stream, one record per fused update step.
//! - `summary.json`: a [`Summary`] tagged with [`SCHEMA_VERSION`].
//!
//! A table built from several summaries has one [`TableRow`] per run.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use mhe_core::engine::io::write_ndjson;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{HarnessError, Result};
use crate::metrics::MetricsReport;
use crate::runner::{EstimatorKind, RunOutput};

/// Bumped whenever a field of [`Summary`] or the CSV columns change.
pub const SCHEMA_VERSION: u32 = 1;

pub const STEPS_FILE: &str = "steps.csv";
pub const ESTIMATES_FILE: &str = "estimates.csv";
pub const STREAM_FILE: &str = "estimates.ndjson";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub estimator: EstimatorKind,
    pub config_hash: String,
    pub sensors: String,
    pub batch_size: usize,
    pub threads: usize,
    pub seed: u64,
    #[serde(flatten)]
    pub metrics: MetricsReport,
}

impl Summary {
    pub fn new(estimator: EstimatorKind, config: &Config, metrics: MetricsReport) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            estimator,
            config_hash: config.hash(),
            sensors: config.sim.sensors.to_string(),
            batch_size: config.estimator.batch_size,
            threads: config.estimator.threads,
            seed: config.sim.seed,
            metrics,
        }
    }
}

/// Output format of [`write_table`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

/// One line of a comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub label: String,
    pub estimator: EstimatorKind,
    pub sensors: String,
    pub batch_size: usize,
    pub threads: usize,
    pub seed: u64,
    pub rms_position_error: f64,
    pub rms_heading_error: f64,
    pub consistency_rms: f64,
    pub median_solve_ms: f64,
    pub dropped_measurements: u64,
}

impl TableRow {
    pub fn new(label: impl Into<String>, s: &Summary) -> Self {
        Self {
            label: label.into(),
            estimator: s.estimator,
            sensors: s.sensors.clone(),
            batch_size: s.batch_size,
            threads: s.threads,
            seed: s.seed,
            rms_position_error: s.metrics.rms_position_error,
            rms_heading_error: s.metrics.rms_heading_error,
            consistency_rms: s.metrics.consistency_rms,
            median_solve_ms: s.metrics.timing.median_ms,
            dropped_measurements: s.metrics.dropped_measurements,
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| HarnessError::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create(path)?);
    for r in rows {
        w.serialize(r).map_err(|e| HarnessError::io(path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| HarnessError::io(path, e))?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| HarnessError::io(path, e))
}

/// Writes every file of a run directory.
pub fn write_run(dir: &Path, run: &RunOutput, summary: &Summary) -> Result<()> {
    write_csv(&dir.join(STEPS_FILE), &run.steps)?;
    write_csv(&dir.join(ESTIMATES_FILE), &run.estimates)?;
    let path = dir.join(STREAM_FILE);
    let mut w = create(&path)?;
    for e in &run.stream {
        write_ndjson(&mut w, e).map_err(|e| HarnessError::io(&path, e))?;
    }
    w.flush().map_err(|e| HarnessError::io(&path, e))?;
    write_json(&dir.join(SUMMARY_FILE), summary)
}

pub fn read_summary(path: &Path) -> Result<Summary> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    let summary: Summary =
        serde_json::from_str(&text).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    if summary.schema_version != SCHEMA_VERSION {
        return Err(HarnessError::Data(format!(
            "{}: schema version {} is not {SCHEMA_VERSION}",
            path.display(),
            summary.schema_version
        )));
    }
    Ok(summary)
}

/// Writes a comparison table.
pub fn write_table(path: &Path, rows: &[TableRow], format: Format) -> Result<()> {
    if rows.is_empty() {
        return Err(HarnessError::Data("a table needs at least one report".into()));
    }
    match format {
        Format::Csv => write_csv(path, rows),
        Format::Json => write_json(path, rows),
    }
}

/// Renders a comparison table to a string.
pub fn render_table(rows: &[TableRow], format: Format) -> Result<String> {
    match format {
        Format::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            for r in rows {
                w.serialize(r).map_err(|e| HarnessError::Data(e.to_string()))?;
            }
            let bytes = w.into_inner().map_err(|e| HarnessError::Data(e.to_string()))?;
            String::from_utf8(bytes).map_err(|e| HarnessError::Data(e.to_string()))
        }
        Format::Json => serde_json::to_string_pretty(rows).map_err(|e| HarnessError::Data(e.to_string())),
    }
}
