//! Prediction and metrics files, seed aggregation and the comparison table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::util;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub id: String,
    pub domain: String,
    pub label: u8,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub model: String,
    pub target: String,
    pub f1: f64,
    pub acc: f64,
    pub auc: f64,
    pub spauc: f64,
}

fn to_csv<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner()
        .map_err(|e| Error::InvalidInput(format!("csv flush: {e}")))
}

fn from_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, e.to_string()),
        ),
        _ => Error::Csv(e),
    })?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    util::write_atomic(path, &to_csv(rows)?)
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    from_csv(path)
}

/// Writes rows sorted by (model, target).
pub fn write_metrics_csv(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.model, &a.target).cmp(&(&b.model, &b.target)));
    util::write_atomic(path, &to_csv(&sorted)?)
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRow>> {
    from_csv(path)
}

/// Mean and sample standard deviation of each metric over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedSummary {
    pub model: String,
    pub target: String,
    pub runs: usize,
    pub f1_mean: f64,
    pub f1_std: f64,
    pub acc_mean: f64,
    pub acc_std: f64,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub spauc_mean: f64,
    pub spauc_std: f64,
}

pub fn aggregate_seeds(rows: &[MetricsRow]) -> Vec<SeedSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricsRow>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.model.clone(), r.target.clone()))
            .or_default()
            .push(r);
    }
    groups
        .into_iter()
        .map(|((model, target), rs)| {
            let col = |f: fn(&MetricsRow) -> f64| rs.iter().map(|r| f(r)).collect::<Vec<_>>();
            let (f1, acc, auc, sp) = (col(|r| r.f1), col(|r| r.acc), col(|r| r.auc), col(|r| r.spauc));
            SeedSummary {
                model,
                target,
                runs: rs.len(),
                f1_mean: util::mean(&f1),
                f1_std: util::std_dev(&f1),
                acc_mean: util::mean(&acc),
                acc_std: util::std_dev(&acc),
                auc_mean: util::mean(&auc),
                auc_std: util::std_dev(&auc),
                spauc_mean: util::mean(&sp),
                spauc_std: util::std_dev(&sp),
            }
        })
        .collect()
}

impl SeedSummary {
    pub fn to_csv(rows: &[SeedSummary]) -> Result<Vec<u8>> {
        to_csv(rows)
    }
}

/// Fixed-width text table, one row per (model, target), sorted.
pub fn render_table(rows: &[MetricsRow]) -> String {
    let mut sorted = rows.to_vec();
    sorted.sort_by(|a, b| (&a.target, &a.model).cmp(&(&b.target, &b.model)));
    let mw = sorted.iter().map(|r| r.model.len()).max().unwrap_or(0).max(5);
    let tw = sorted.iter().map(|r| r.target.len()).max().unwrap_or(0).max(6);
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<mw$}  {:<tw$}  {:>6}  {:>6}  {:>6}  {:>6}",
        "model", "target", "F1", "Acc", "AUC", "SPAUC"
    );
    let _ = writeln!(out, "{}", "-".repeat(mw + tw + 4 + 4 * 8));
    for r in &sorted {
        let _ = writeln!(
            out,
            "{:<mw$}  {:<tw$}  {:>6.4}  {:>6.4}  {:>6.4}  {:>6.4}",
            r.model, r.target, r.f1, r.acc, r.auc, r.spauc
        );
    }
    out
}
