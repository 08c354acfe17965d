//! Cross-run statistics: t-intervals per UL iteration and per wall-clock bucket.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use tsg_core::trace::TraceRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRow {
    pub iteration: usize,
    pub mean_f1: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
    pub mean_wall_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WallBucketRow {
    pub bucket_end_s: f64,
    /// Runs that had recorded at least one iteration by the bucket end.
    pub runs: usize,
    pub mean_f1: f64,
    pub ci_lo: f64,
    pub ci_hi: f64,
}

/// Two-sided 95% quantile of Student's t with `df` degrees of freedom.
pub fn t_quantile_975(df: usize) -> f64 {
    StudentsT::new(0.0, 1.0, df as f64).expect("df >= 1").inverse_cdf(0.975)
}

/// Sample mean and 95% t half-width. The width is exactly zero for a single
/// value or identical values.
pub fn mean_ci(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    assert!(n > 0, "mean of no values");
    if values.iter().all(|v| v.to_bits() == values[0].to_bits()) {
        return (values[0], 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, t_quantile_975(n - 1) * (var / n as f64).sqrt())
}

/// One row per UL iteration present in every run (the common prefix when a run aborted early).
pub fn by_iteration(runs: &[&[TraceRecord]]) -> Vec<AggregateRow> {
    let len = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    (0..len)
        .map(|idx| {
            let f1: Vec<f64> = runs.iter().map(|r| r[idx].f1).collect();
            let (mean, half) = mean_ci(&f1);
            AggregateRow {
                iteration: runs[0][idx].i,
                mean_f1: mean,
                ci_lo: mean - half,
                ci_hi: mean + half,
                mean_wall_s: runs.iter().map(|r| r[idx].wall_s).sum::<f64>() / runs.len() as f64,
            }
        })
        .collect()
}

/// Splits `[0, slowest run]` into `buckets` equal intervals and aggregates
/// each run's latest f1 at every bucket end.
pub fn by_wall_time(runs: &[&[TraceRecord]], buckets: usize) -> Vec<WallBucketRow> {
    let end = runs.iter().filter_map(|r| r.last()).map(|r| r.wall_s).fold(0.0, f64::max);
    if buckets == 0 || end <= 0.0 {
        return Vec::new();
    }
    let width = end / buckets as f64;
    (1..=buckets)
        .filter_map(|b| {
            let at = if b == buckets { end } else { width * b as f64 };
            let f1: Vec<f64> = runs
                .iter()
                .filter_map(|r| r.iter().take_while(|rec| rec.wall_s <= at).last())
                .map(|rec| rec.f1)
                .collect();
            if f1.is_empty() {
                return None;
            }
            let (mean, half) = mean_ci(&f1);
            Some(WallBucketRow { bucket_end_s: at, runs: f1.len(), mean_f1: mean, ci_lo: mean - half, ci_hi: mean + half })
        })
        .collect()
}

pub fn write_rows<W: Write, T: Serialize>(out: W, rows: &[T]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_rows<R: Read, T: for<'de> Deserialize<'de>>(input: R) -> csv::Result<Vec<T>> {
    csv::Reader::from_reader(input).deserialize().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(i: usize, f1: f64, wall_s: f64) -> TraceRecord {
        TraceRecord {
            run_id: 0,
            i,
            cum_ml: i,
            cum_ll: i,
            wall_s,
            f1,
            f2: 0.0,
            f3: 0.0,
            gnorm: 0.0,
            j: 1,
            k: 1,
            alpha: 0.1,
            beta: 0.1,
            gamma: 0.1,
        }
    }

    #[test]
    fn t_quantile_matches_table() {
        assert!((t_quantile_975(9) - 2.262157).abs() < 1e-6);
        assert!((t_quantile_975(1) - 12.706205).abs() < 1e-5);
    }

    #[test]
    fn ci_width_zero_for_single_or_identical() {
        assert_eq!(mean_ci(&[3.5]), (3.5, 0.0));
        assert_eq!(mean_ci(&[0.1; 7]), (0.1, 0.0));
        let (m, h) = mean_ci(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((h - t_quantile_975(2) / 3f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn iteration_rows_use_common_prefix() {
        let a = vec![rec(1, 1.0, 0.1), rec(2, 0.5, 0.2), rec(3, 0.25, 0.3)];
        let b = vec![rec(1, 3.0, 0.3), rec(2, 1.5, 0.4)];
        let rows = by_iteration(&[&a, &b]);
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].iteration, 2);
        assert_eq!(rows[1].mean_f1, 1.0);
        assert!((rows[1].mean_wall_s - 0.3).abs() < 1e-15);
        assert!(rows[1].ci_hi > rows[1].ci_lo);
    }

    #[test]
    fn wall_buckets_take_latest_record() {
        let a = vec![rec(1, 4.0, 1.0), rec(2, 2.0, 2.0)];
        let b = vec![rec(1, 8.0, 3.0), rec(2, 6.0, 4.0)];
        let rows = by_wall_time(&[&a, &b], 4);
        assert_eq!(rows.iter().map(|r| r.runs).collect::<Vec<_>>(), [1, 1, 2, 2]);
        assert_eq!(rows[0].mean_f1, 4.0);
        assert_eq!(rows[1].mean_f1, 2.0);
        assert_eq!(rows[3].mean_f1, 4.0);
    }

    #[test]
    fn rows_round_trip_exactly() {
        let rows = vec![AggregateRow { iteration: 1, mean_f1: 0.1 + 0.2, ci_lo: -1e-300, ci_hi: 1.0 / 3.0, mean_wall_s: 2.5e-7 }];
        let mut buf = Vec::new();
        write_rows(&mut buf, &rows).unwrap();
        assert!(buf.starts_with(b"iteration,mean_f1,ci_lo,ci_hi,mean_wall_s\n"));
        let back: Vec<AggregateRow> = read_rows(buf.as_slice()).unwrap();
        assert_eq!(back, rows);
    }
}
