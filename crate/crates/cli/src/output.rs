//! Output persistence: every file carries a header block with the resolved
//! config, seed, stream layout, and schema version; the timestamp sits on
//! its own line so reproducibility checks can strip it; bodies are written
//! atomically (temp file + rename) and any non-finite numeric cell fails
//! the run before anything lands on disk.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::{ExperimentConfig, OutputFormat};
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;
/// Recorded in every header so outputs are replayable without the binary.
const STREAM_LAYOUT: &str =
    "chacha8 keyed by (seed, replica, domain, slot); domains: field=1, resolution=2, dual=3, exit=4";

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Int(u64),
    /// Grid coordinate (time, horizon, rate): minimal decimal form, so an
    /// integral 5.0 prints as `5`.
    Num(f64),
    /// Measured value: shortest round-trip decimal; integral values keep a
    /// `.0` so the column stays typed.
    Float(f64),
    /// Absent value (e.g. exit coordinates of a censored walk); rendered as
    /// an empty CSV cell / JSON null.
    Empty,
}

impl Cell {
    fn csv(&self) -> String {
        match self {
            Cell::Int(k) => k.to_string(),
            Cell::Num(x) => format!("{x}"),
            Cell::Float(x) => format!("{x:?}"),
            Cell::Empty => String::new(),
        }
    }

    fn json(&self) -> serde_json::Value {
        match self {
            Cell::Int(k) => serde_json::Value::from(*k),
            Cell::Num(x) | Cell::Float(x) => serde_json::Value::from(*x),
            Cell::Empty => serde_json::Value::Null,
        }
    }
}

/// One tabular output file: fixed columns, row-major cells.
pub struct Table {
    pub name: &'static str,
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(name: &'static str, columns: Vec<&'static str>) -> Self {
        Table {
            name,
            columns,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    fn check_finite(&self) -> Result<(), CliError> {
        for (i, row) in self.rows.iter().enumerate() {
            for (cell, col) in row.iter().zip(&self.columns) {
                if let Cell::Num(x) | Cell::Float(x) = cell {
                    if !x.is_finite() {
                        return Err(CliError::non_finite(self.name, col, i));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Shared header metadata, resolved once per run.
pub struct RunHeader {
    pub config_json: String,
    pub seed: u64,
    pub timestamp: u64,
}

impl RunHeader {
    pub fn new(config: &ExperimentConfig) -> Result<Self, CliError> {
        let config_json = serde_json::to_string(config)
            .map_err(|e| CliError::usage(format!("cannot serialize config: {e}")))?;
        let timestamp = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0);
        Ok(RunHeader {
            config_json,
            seed: config.model.seed,
            timestamp,
        })
    }
}

fn atomic_write(path: &Path, contents: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)
        .map_err(|e| CliError::usage(format!("cannot write {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path)
        .map_err(|e| CliError::usage(format!("cannot rename {}: {e}", tmp.display())))
}

/// Writes one table under `dir` in the requested format. Returns the final
/// path.
pub fn write_table(
    dir: &Path,
    header: &RunHeader,
    format: OutputFormat,
    table: &Table,
) -> Result<PathBuf, CliError> {
    table.check_finite()?;
    match format {
        OutputFormat::Csv => {
            let path = dir.join(format!("{}.csv", table.name));
            let mut text = String::new();
            let _ = writeln!(text, "# schema_version: {SCHEMA_VERSION}");
            let _ = writeln!(text, "# config: {}", header.config_json);
            let _ = writeln!(text, "# seed: {}", header.seed);
            let _ = writeln!(text, "# streams: {STREAM_LAYOUT}");
            let _ = writeln!(text, "# timestamp: {}", header.timestamp);
            let _ = writeln!(text, "{}", table.columns.join(","));
            for row in &table.rows {
                let line: Vec<String> = row.iter().map(Cell::csv).collect();
                let _ = writeln!(text, "{}", line.join(","));
            }
            atomic_write(&path, &text)?;
            Ok(path)
        }
        OutputFormat::Json => {
            // check_finite already vetted every Float cell; Empty → null is
            // deliberate here, so this bypasses the report-level null hunt.
            let rows: Vec<serde_json::Value> = table
                .rows
                .iter()
                .map(|row| {
                    serde_json::Value::Object(
                        table
                            .columns
                            .iter()
                            .zip(row)
                            .map(|(c, cell)| (c.to_string(), cell.json()))
                            .collect(),
                    )
                })
                .collect();
            write_json_doc(dir, header, table.name, serde_json::Value::Array(rows))
        }
    }
}

/// Writes a JSON report file `{name}.json` with the standard header fields
/// and the serialized body. serde_json renders f64 NaN/inf as null, so any
/// null in the serialized body means a non-finite number leaked in, and the
/// run fails with its path.
pub fn write_report<T: Serialize>(
    dir: &Path,
    header: &RunHeader,
    name: &str,
    body: &T,
) -> Result<PathBuf, CliError> {
    let body = serde_json::to_value(body).map_err(|e| {
        CliError::non_finite_report(name, format!("body not representable as JSON: {e}"))
    })?;
    if let Some(path_to_nan) = find_non_finite(&body, name) {
        return Err(CliError::non_finite_report(name, path_to_nan));
    }
    write_json_doc(dir, header, name, body)
}

fn write_json_doc(
    dir: &Path,
    header: &RunHeader,
    name: &str,
    body: serde_json::Value,
) -> Result<PathBuf, CliError> {
    let path = dir.join(format!("{name}.json"));
    let config: serde_json::Value = serde_json::from_str(&header.config_json)
        .map_err(|e| CliError::usage(format!("config reserialization failed: {e}")))?;
    let doc = serde_json::json!({
        "schema_version": SCHEMA_VERSION,
        "config": config,
        "seed": header.seed,
        "streams": STREAM_LAYOUT,
        "timestamp": header.timestamp,
        "body": body,
    });
    let mut text = serde_json::to_string_pretty(&doc)
        .map_err(|e| CliError::usage(format!("cannot encode {name}.json: {e}")))?;
    text.push('\n');
    atomic_write(&path, &text)?;
    Ok(path)
}

/// serde_json maps f64 NaN/inf to null; any null reached through a numeric
/// field would silently break downstream plots, so nulls introduced by
/// serialization are hunted down here. Explicit `Cell::Empty` nulls never
/// pass through this path.
fn find_non_finite(value: &serde_json::Value, path: &str) -> Option<String> {
    match value {
        serde_json::Value::Null => Some(path.to_string()),
        serde_json::Value::Array(items) => items
            .iter()
            .enumerate()
            .find_map(|(i, v)| find_non_finite(v, &format!("{path}[{i}]"))),
        serde_json::Value::Object(map) => map
            .iter()
            .find_map(|(k, v)| find_non_finite(v, &format!("{path}.{k}"))),
        _ => None,
    }
}
