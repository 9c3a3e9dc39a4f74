//! Per-epoch metrics and their CSV and plot-data files.

use std::path::Path;

use exdrop_core::reg::RegValues;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, HarnessError, Result};

pub const METRICS_HEADER: [&str; 10] = [
    "epoch",
    "task_loss",
    "reg_q",
    "reg_k",
    "reg_v",
    "reg_av",
    "reg_ff",
    "train_loss",
    "val_acc",
    "seed",
];

/// One training epoch. Losses are means over the epoch's minibatches.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub task_loss: f64,
    pub reg: RegValues,
    pub val_accuracy: f64,
    /// Set on the last row only, for the selected epoch's parameters.
    pub test_accuracy: Option<f64>,
    pub wall_seconds: f64,
    pub seed: u64,
}

/// The persisted columns. Wall time and test accuracy stay out of the file
/// so that reruns are byte-identical.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub epoch: usize,
    pub task_loss: f64,
    pub reg_q: f64,
    pub reg_k: f64,
    pub reg_v: f64,
    pub reg_av: f64,
    pub reg_ff: f64,
    pub train_loss: f64,
    pub val_acc: f64,
    pub seed: u64,
}

impl From<&MetricsRow> for CsvRow {
    fn from(r: &MetricsRow) -> Self {
        CsvRow {
            epoch: r.epoch,
            task_loss: r.task_loss,
            reg_q: r.reg.q,
            reg_k: r.reg.k,
            reg_v: r.reg.v,
            reg_av: r.reg.av,
            reg_ff: r.reg.ff,
            train_loss: r.train_loss,
            val_acc: r.val_accuracy,
            seed: r.seed,
        }
    }
}

impl CsvRow {
    /// `train_loss - (task_loss + Σ reg)`.
    pub fn decomposition_gap(&self) -> f64 {
        self.train_loss - (self.task_loss + self.reg_q + self.reg_k + self.reg_v + self.reg_av + self.reg_ff)
    }
}

fn csv_err(path: &Path) -> impl FnOnce(csv::Error) -> HarnessError + '_ {
    move |source| HarnessError::Csv {
        path: path.to_owned(),
        source,
    }
}

/// Writes `rows` to `path`. Floats are written in shortest round-trip form.
pub fn emit_metrics(rows: &[MetricsRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(invalid("metrics", "no rows to write"));
    }
    let csv_rows: Vec<CsvRow> = rows.iter().map(CsvRow::from).collect();
    write_rows(&csv_rows, path)
}

pub fn write_rows(rows: &[CsvRow], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for r in rows {
        w.serialize(r).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}

pub fn read_metrics(path: &Path) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let header: Vec<String> = r.headers().map_err(csv_err(path))?.iter().map(str::to_owned).collect();
    if header != METRICS_HEADER {
        return Err(HarnessError::Ingestion {
            path: path.to_owned(),
            reason: format!("unexpected header {}", header.join(",")),
        });
    }
    r.deserialize().map(|row| row.map_err(csv_err(path))).collect()
}

/// A point of a named curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotPoint {
    pub x: f64,
    pub y: f64,
    pub series: String,
}

/// Loss and accuracy curves against epoch, one series per column.
pub fn plot_points(rows: &[CsvRow]) -> Vec<PlotPoint> {
    let columns: [(&str, fn(&CsvRow) -> f64); 8] = [
        ("train_loss", |r| r.train_loss),
        ("task_loss", |r| r.task_loss),
        ("reg_q", |r| r.reg_q),
        ("reg_k", |r| r.reg_k),
        ("reg_v", |r| r.reg_v),
        ("reg_av", |r| r.reg_av),
        ("reg_ff", |r| r.reg_ff),
        ("val_acc", |r| r.val_acc),
    ];
    let mut out = Vec::with_capacity(rows.len() * columns.len());
    for (name, get) in columns {
        for r in rows {
            out.push(PlotPoint {
                x: r.epoch as f64,
                y: get(r),
                series: format!("{name}/seed{}", r.seed),
            });
        }
    }
    out
}

pub fn export_plotdata(rows: &[CsvRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(invalid("metrics", "no rows to plot"));
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err(path))?;
    for p in plot_points(rows) {
        w.serialize(p).map_err(csv_err(path))?;
    }
    w.flush().map_err(io_err(path))
}
