//! Tabular and JSON artifacts.

use std::collections::BTreeMap;
use std::io::{self, Write};

use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::runner::{BatchResult, PredictionTable, RepStatus, RunRecord};

/// Metrics summarized across repetitions, in column order.
pub const SUMMARY_METRICS: [&str; 5] = ["nrmse", "nnois", "coverage", "rmse", "final_nll"];

/// Quantile with linear interpolation between order statistics (the
/// `(n - 1) p` rule). `sorted` must be ascending and non-empty.
pub fn quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Stats {
    pub n: usize,
    pub mean: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

impl Stats {
    /// `None` for an empty sample.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Some(Self {
            n: v.len(),
            mean: v.iter().sum::<f64>() / v.len() as f64,
            min: v[0],
            q1: quantile(&v, 0.25),
            median: quantile(&v, 0.5),
            q3: quantile(&v, 0.75),
            max: v[v.len() - 1],
        })
    }
}

pub fn metric_value(record: &RunRecord, metric: &str) -> Option<f64> {
    let m = record.metrics.as_ref();
    match metric {
        "nrmse" => m.map(|m| m.nrmse),
        "nnois" => m.map(|m| m.nnois),
        "coverage" => m.map(|m| m.coverage),
        "rmse" => m.map(|m| m.rmse),
        "final_nll" => record.final_nll,
        _ => None,
    }
}

fn sample(records: &[RunRecord], metric: &str) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.status == RepStatus::Ok)
        .filter_map(|r| metric_value(r, metric))
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct Summary {
    pub label: String,
    pub repetitions: usize,
    pub failed: usize,
    pub test_set: String,
    /// Absent entries mean no repetition succeeded.
    pub metrics: BTreeMap<String, Option<Stats>>,
    pub config: ExperimentConfig,
}

impl Summary {
    pub fn new(label: &str, cfg: &ExperimentConfig, test_set: String, records: &[RunRecord]) -> Self {
        let metrics = SUMMARY_METRICS
            .iter()
            .map(|m| (m.to_string(), Stats::of(&sample(records, m))))
            .collect();
        Self {
            label: label.to_string(),
            repetitions: records.len(),
            failed: records.iter().filter(|r| r.status == RepStatus::Failed).count(),
            test_set,
            metrics,
            config: cfg.clone(),
        }
    }

    pub fn median(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric)?.as_ref().map(|s| s.median)
    }
}

fn cell<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

/// One row per repetition; failed repetitions leave their metric cells empty.
/// Timings live in records.json so that this file is reproducible byte for byte.
pub fn write_metrics_csv<W: Write>(out: W, records: &[RunRecord]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rep", "seed", "nrmse", "nnois", "coverage", "final_nll", "epochs"])?;
    for r in records {
        w.write_record([
            r.rep.to_string(),
            r.seed.to_string(),
            cell(metric_value(r, "nrmse")),
            cell(metric_value(r, "nnois")),
            cell(metric_value(r, "coverage")),
            cell(r.final_nll),
            cell(r.epochs),
        ])?;
    }
    w.flush()
}

pub fn write_predictions<W: Write>(out: W, table: &PredictionTable) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dim = table.x.ncols();
    let mut header: Vec<String> = if dim == 1 {
        vec!["x".into()]
    } else {
        (0..dim).map(|p| format!("x{p}")).collect()
    };
    header.extend(["truth", "mean", "lower", "upper"].map(String::from));
    w.write_record(&header)?;
    let p = &table.prediction;
    for i in 0..table.x.nrows() {
        let mut row: Vec<String> = table.x.row(i).iter().map(f64::to_string).collect();
        row.extend([table.truth[i], p.mean[i], p.lower[i], p.upper[i]].map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush()
}

/// Quartiles of every summary metric per sweep value.
pub fn write_sweep_csv<W: Write>(out: W, axis: &str, batches: &[BatchResult]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "axis", "tag", "metric", "n", "failed", "q1", "median", "q3", "mean", "min", "max",
    ])?;
    for b in batches {
        for metric in SUMMARY_METRICS {
            let stats = b.summary.metrics.get(metric).cloned().flatten();
            let f = |g: fn(&Stats) -> f64| cell(stats.as_ref().map(g));
            w.write_record([
                axis.to_string(),
                b.label.clone(),
                metric.to_string(),
                stats.as_ref().map_or(0, |s| s.n).to_string(),
                b.failed().to_string(),
                f(|s| s.q1),
                f(|s| s.median),
                f(|s| s.q3),
                f(|s| s.mean),
                f(|s| s.min),
                f(|s| s.max),
            ])?;
        }
    }
    w.flush()
}

/// Per-repetition metrics of every compared family, with the dataset hash
/// showing that each repetition saw the same data across families.
pub fn write_compare_csv<W: Write>(out: W, batches: &[BatchResult]) -> io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "family",
        "rep",
        "seed",
        "dataset_hash",
        "nrmse",
        "nnois",
        "coverage",
        "final_nll",
    ])?;
    for b in batches {
        for r in &b.records {
            w.write_record([
                b.label.clone(),
                r.rep.to_string(),
                r.seed.to_string(),
                r.dataset_hash.clone().unwrap_or_default(),
                cell(metric_value(r, "nrmse")),
                cell(metric_value(r, "nnois")),
                cell(metric_value(r, "coverage")),
                cell(r.final_nll),
            ])?;
        }
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantiles_interpolate_linearly() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn stats_sort_their_input() {
        let s = Stats::of(&[3.0, 1.0, 2.0]).unwrap();
        assert_eq!((s.min, s.median, s.max, s.mean), (1.0, 2.0, 3.0, 2.0));
        assert!(Stats::of(&[]).is_none());
    }

    #[test]
    fn failed_rows_have_empty_metric_cells() {
        let failed = RunRecord {
            rep: 1,
            seed: 4,
            status: RepStatus::Failed,
            error: Some("boom".into()),
            metrics: None,
            final_nll: None,
            epochs: None,
            wall_ms: 12,
            converged: None,
            best_restart: None,
            failed_restarts: None,
            dataset_hash: None,
            jitter: None,
            noise_variance: None,
        };
        let mut buf = Vec::new();
        write_metrics_csv(&mut buf, &[failed]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().nth(1), Some("1,4,,,,,"));
    }
}
