//! Per-UL-iteration run records and their CSV form.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, TsgError};
use crate::oracle::Point;

pub const TRACE_HEADER: [&str; 14] = [
    "run_id", "i", "cum_ml", "cum_ll", "wall_s", "f1", "f2", "f3", "gnorm", "J", "K", "alpha",
    "beta", "gamma",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub run_id: u64,
    pub i: usize,
    pub cum_ml: usize,
    pub cum_ll: usize,
    pub wall_s: f64,
    pub f1: f64,
    pub f2: f64,
    pub f3: f64,
    pub gnorm: f64,
    #[serde(rename = "J")]
    pub j: usize,
    #[serde(rename = "K")]
    pub k: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl TraceRecord {
    /// Copy with the wall-clock column zeroed, for run-to-run comparisons.
    pub fn timeless(&self) -> TraceRecord {
        TraceRecord {
            wall_s: 0.0,
            ..self.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunTrace {
    pub records: Vec<TraceRecord>,
    pub final_point: Point,
    /// CG solves that stopped on non-positive curvature, summed over the run.
    pub curvature_events: usize,
}

impl RunTrace {
    pub fn timeless(&self) -> Vec<TraceRecord> {
        self.records.iter().map(TraceRecord::timeless).collect()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }
}

/// Checks the ordering invariants: `i` strictly increasing, `wall_s` nondecreasing.
pub fn validate_records(records: &[TraceRecord]) -> Result<()> {
    for w in records.windows(2) {
        if w[1].i <= w[0].i {
            return Err(TsgError::InvalidArgument(format!(
                "trace iteration {} follows {}",
                w[1].i, w[0].i
            )));
        }
        if w[1].wall_s < w[0].wall_s {
            return Err(TsgError::InvalidArgument(format!(
                "trace wall time decreases at iteration {}",
                w[1].i
            )));
        }
    }
    Ok(())
}

pub fn write_trace_csv<W: Write>(out: W, records: &[TraceRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    if records.is_empty() {
        w.write_record(TRACE_HEADER).map_err(csv_err)?;
    }
    for r in records {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(input: R) -> Result<Vec<TraceRecord>> {
    let mut rd = csv::Reader::from_reader(input);
    let header = rd.headers().map_err(csv_err)?.clone();
    if header.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(TsgError::Parse(format!("unexpected trace header: {header:?}")));
    }
    let mut out = Vec::new();
    for rec in rd.deserialize() {
        out.push(rec.map_err(csv_err)?);
    }
    Ok(out)
}

fn csv_err(e: csv::Error) -> TsgError {
    TsgError::Parse(e.to_string())
}
