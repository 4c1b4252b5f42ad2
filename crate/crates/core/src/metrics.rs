//! Per-update training metrics and their CSV encoding.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::Result;

pub const CSV_VERSION: &str = "#condyn-metrics-v1";
pub const CSV_HEADER: &str = "update,avg_return,avg_discounted_return,rl_loss,model_nll,consistency_loss,elbo,imitation_loss,imagination_ll,collapse_monitor,wallclock_s";
pub const METRIC_NAMES: [&str; 10] = [
    "avg_return",
    "avg_discounted_return",
    "rl_loss",
    "model_nll",
    "consistency_loss",
    "elbo",
    "imitation_loss",
    "imagination_ll",
    "collapse_monitor",
    "wallclock_s",
];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainMetrics {
    pub update: usize,
    pub avg_return: Option<f64>,
    pub avg_discounted_return: Option<f64>,
    pub rl_loss: Option<f64>,
    pub model_nll: Option<f64>,
    pub consistency_loss: Option<f64>,
    pub elbo: Option<f64>,
    pub imitation_loss: Option<f64>,
    pub imagination_ll: Option<f64>,
    pub collapse_monitor: Option<f64>,
    pub wallclock_s: Option<f64>,
}

impl TrainMetrics {
    pub fn values(&self) -> [Option<f64>; 10] {
        [
            self.avg_return,
            self.avg_discounted_return,
            self.rl_loss,
            self.model_nll,
            self.consistency_loss,
            self.elbo,
            self.imitation_loss,
            self.imagination_ll,
            self.collapse_monitor,
            self.wallclock_s,
        ]
    }

    pub fn csv_row(&self) -> String {
        let mut row = self.update.to_string();
        for v in self.values() {
            row.push(',');
            if let Some(v) = v {
                row.push_str(&v.to_string());
            }
        }
        row
    }
}

pub trait MetricsSink {
    fn record(&mut self, row: &TrainMetrics) -> Result<()>;
}

impl MetricsSink for Vec<TrainMetrics> {
    fn record(&mut self, row: &TrainMetrics) -> Result<()> {
        self.push(row.clone());
        Ok(())
    }
}

/// Writes the versioned header up front and flushes after every row.
pub struct CsvWriter {
    out: BufWriter<File>,
}

impl CsvWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let mut out = BufWriter::new(File::create(path)?);
        writeln!(out, "{CSV_VERSION}\n{CSV_HEADER}")?;
        out.flush()?;
        Ok(Self { out })
    }
}

impl MetricsSink for CsvWriter {
    fn record(&mut self, row: &TrainMetrics) -> Result<()> {
        writeln!(self.out, "{}", row.csv_row())?;
        self.out.flush()?;
        Ok(())
    }
}

/// Forwards to both sinks.
pub struct Tee<'a, A: MetricsSink + ?Sized, B: MetricsSink + ?Sized>(pub &'a mut A, pub &'a mut B);

impl<A: MetricsSink + ?Sized, B: MetricsSink + ?Sized> MetricsSink for Tee<'_, A, B> {
    fn record(&mut self, row: &TrainMetrics) -> Result<()> {
        self.0.record(row)?;
        self.1.record(row)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_leave_missing_metrics_empty() {
        let m = TrainMetrics { update: 3, rl_loss: Some(0.1), imagination_ll: Some(-941.5), ..Default::default() };
        assert_eq!(m.csv_row(), "3,,,0.1,,,,,-941.5,,");
        assert_eq!(CSV_HEADER.split(',').count(), 11);
        assert_eq!(&CSV_HEADER.split(',').skip(1).collect::<Vec<_>>()[..], &METRIC_NAMES[..]);
    }

    #[test]
    fn values_round_trip_through_text() {
        for v in [0.1 + 0.2, 1e-300, -123456.789e10, f64::MIN_POSITIVE] {
            let m = TrainMetrics { update: 0, elbo: Some(v), ..Default::default() };
            let field = m.csv_row().split(',').nth(6).unwrap().to_string();
            assert_eq!(field.parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn writer_flushes_each_row() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let mut w = CsvWriter::create(&path).unwrap();
        w.record(&TrainMetrics { update: 0, ..Default::default() }).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, format!("{CSV_VERSION}\n{CSV_HEADER}\n0,,,,,,,,,,\n"));
    }
}
