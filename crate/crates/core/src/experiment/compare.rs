use std::fmt;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::metrics_io::MetricsTable;
use super::METRICS_FILE;
use crate::error::{Error, Result};

/// Lower is better for these; higher for the rest.
const MINIMIZED: [&str; 3] = ["kl_to_vllm", "loss", "grad_norm"];
const SKIPPED: [&str; 2] = ["iter", "snapshot_version"];

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricComparison {
    pub column: String,
    pub final_a: Option<f64>,
    pub final_b: Option<f64>,
    pub best_a: Option<f64>,
    pub best_b: Option<f64>,
}

impl MetricComparison {
    /// `final_a - final_b`.
    pub fn final_delta(&self) -> Option<f64> {
        Some(self.final_a? - self.final_b?)
    }

    /// `best_a - best_b`.
    pub fn best_delta(&self) -> Option<f64> {
        Some(self.best_a? - self.best_b?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub run_a: PathBuf,
    pub run_b: PathBuf,
    pub metrics: Vec<MetricComparison>,
    /// Final entropy of A minus that of B.
    pub entropy_delta: Option<f64>,
    /// `(column, best A - best B)` for every Pass@k column.
    pub pass_at_k_deltas: Vec<(String, Option<f64>)>,
}

/// Final and best value per metric for two run directories.
pub fn compare(dir_a: &Path, dir_b: &Path) -> Result<ComparisonReport> {
    let path_a = dir_a.join(METRICS_FILE);
    let path_b = dir_b.join(METRICS_FILE);
    let a = MetricsTable::read(&path_a)?;
    let b = MetricsTable::read(&path_b)?;
    // A column present on one side only is reported against the file lacking it.
    for (have, lacking, lacking_path) in [(&a, &b, &path_b), (&b, &a, &path_a)] {
        if let Some(c) = have.columns.iter().find(|c| !lacking.columns.contains(c)) {
            return Err(Error::SchemaMismatch {
                column: c.clone(),
                path: lacking_path.clone(),
            });
        }
    }
    let metrics: Vec<MetricComparison> = a
        .columns
        .iter()
        .filter(|c| !SKIPPED.contains(&c.as_str()))
        .map(|c| {
            let minimize = MINIMIZED.contains(&c.as_str());
            let ca = a.column(c).unwrap_or_default();
            let cb = b.column(c).unwrap_or_default();
            MetricComparison {
                column: c.clone(),
                final_a: last(&ca),
                final_b: last(&cb),
                best_a: best(&ca, minimize),
                best_b: best(&cb, minimize),
            }
        })
        .collect();
    let entropy_delta = metrics
        .iter()
        .find(|m| m.column == "entropy")
        .and_then(MetricComparison::final_delta);
    let pass_at_k_deltas = metrics
        .iter()
        .filter(|m| m.column.starts_with("pass_at_"))
        .map(|m| (m.column.clone(), m.best_delta()))
        .collect();
    Ok(ComparisonReport {
        run_a: dir_a.to_path_buf(),
        run_b: dir_b.to_path_buf(),
        metrics,
        entropy_delta,
        pass_at_k_deltas,
    })
}

fn last(xs: &[Option<f64>]) -> Option<f64> {
    xs.iter().rev().find_map(|x| x.filter(|v| !v.is_nan()))
}

fn best(xs: &[Option<f64>], minimize: bool) -> Option<f64> {
    xs.iter().flatten().filter(|v| !v.is_nan()).copied().reduce(|acc, v| {
        if (minimize && v < acc) || (!minimize && v > acc) {
            v
        } else {
            acc
        }
    })
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.6}"))
}

fn signed(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:+.6}"))
}

impl fmt::Display for ComparisonReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "A = {}", self.run_a.display())?;
        writeln!(f, "B = {}", self.run_b.display())?;
        writeln!(
            f,
            "{:<14} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
            "metric", "final A", "final B", "final A-B", "best A", "best B", "best A-B"
        )?;
        for m in &self.metrics {
            writeln!(
                f,
                "{:<14} {:>12} {:>12} {:>12} {:>12} {:>12} {:>12}",
                m.column,
                cell(m.final_a),
                cell(m.final_b),
                signed(m.final_delta()),
                cell(m.best_a),
                cell(m.best_b),
                signed(m.best_delta()),
            )?;
        }
        writeln!(f, "final entropy delta (A-B): {}", signed(self.entropy_delta))?;
        for (col, d) in &self.pass_at_k_deltas {
            writeln!(f, "best {col} delta (A-B): {}", signed(*d))?;
        }
        Ok(())
    }
}
