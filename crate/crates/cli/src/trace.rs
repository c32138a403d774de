//! Trace and aggregate CSV files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so parsing
//! a file back gives the exact values (NaN included).

use std::fs::File;
use std::path::Path;

use kfpo::learner::RunRecord;

use crate::CliError;

pub const TRACE_HEADER: [&str; 5] = ["iter", "cost", "normalized_error", "grad_norm", "seconds"];
pub const AGGREGATE_HEADER: [&str; 4] = ["iter", "mean", "min", "max"];

fn create(path: &Path) -> Result<csv::Writer<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> CliError + '_ {
    move |source| CliError::Csv {
        path: path.to_path_buf(),
        source,
    }
}

/// Write one row per record. `seconds` is written as 0 unless `timing` is set.
pub fn emit_trace(records: &[RunRecord], path: &Path, timing: bool) -> Result<(), CliError> {
    let mut w = create(path)?;
    let err = csv_err(path);
    w.write_record(TRACE_HEADER).map_err(&err)?;
    for r in records {
        let seconds = if timing { r.seconds } else { 0.0 };
        w.write_record([
            r.iter.to_string(),
            r.cost.to_string(),
            r.normalized_error.to_string(),
            r.grad_norm.to_string(),
            seconds.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path, line: usize) -> Result<T, CliError> {
    let raw = rec.get(i).unwrap_or("");
    raw.trim().parse().map_err(|_| CliError::Parse {
        path: path.to_path_buf(),
        reason: format!("line {line}: bad `{}` value {raw:?}", TRACE_HEADER[i]),
    })
}

pub fn read_trace(path: &Path) -> Result<Vec<RunRecord>, CliError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err(path))?;
    let header = rdr.headers().map_err(csv_err(path))?.clone();
    if header.iter().ne(TRACE_HEADER) {
        return Err(CliError::Parse {
            path: path.to_path_buf(),
            reason: format!("unexpected header {:?}", header.iter().collect::<Vec<_>>()),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let line = i + 2;
        out.push(RunRecord {
            iter: field(&rec, 0, path, line)?,
            cost: field(&rec, 1, path, line)?,
            normalized_error: field(&rec, 2, path, line)?,
            grad_norm: field(&rec, 3, path, line)?,
            seconds: field(&rec, 4, path, line)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AggregateRow {
    pub iter: usize,
    pub mean: f64,
    pub min: f64,
    pub max: f64,
}

/// Mean/min/max of the normalized error per iteration, over the rows every
/// trace has.
pub fn aggregate(traces: &[&[RunRecord]]) -> Vec<AggregateRow> {
    let rows = traces.iter().map(|t| t.len()).min().unwrap_or(0);
    (0..rows)
        .map(|k| {
            let values = traces.iter().map(|t| t[k].normalized_error);
            let (mut sum, mut min, mut max) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
            for v in values {
                sum += v;
                min = min.min(v);
                max = max.max(v);
            }
            let mut mean = sum / traces.len() as f64;
            // Rounding can push the mean of near-equal values just outside the range.
            if min <= max {
                mean = mean.clamp(min, max);
            }
            AggregateRow {
                iter: traces[0][k].iter,
                mean,
                min,
                max,
            }
        })
        .collect()
}

pub fn write_aggregate(rows: &[AggregateRow], path: &Path) -> Result<(), CliError> {
    let mut w = create(path)?;
    let err = csv_err(path);
    w.write_record(AGGREGATE_HEADER).map_err(&err)?;
    for r in rows {
        w.write_record([
            r.iter.to_string(),
            r.mean.to_string(),
            r.min.to_string(),
            r.max.to_string(),
        ])
        .map_err(&err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_aggregate(path: &Path) -> Result<Vec<AggregateRow>, CliError> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err(path))?;
        let parse = |j: usize| -> Result<f64, CliError> {
            rec.get(j).unwrap_or("").parse().map_err(|_| CliError::Parse {
                path: path.to_path_buf(),
                reason: format!("line {}: bad `{}` value", i + 2, AGGREGATE_HEADER[j]),
            })
        };
        out.push(AggregateRow {
            iter: parse(0)? as usize,
            mean: parse(1)?,
            min: parse(2)?,
            max: parse(3)?,
        });
    }
    Ok(out)
}
