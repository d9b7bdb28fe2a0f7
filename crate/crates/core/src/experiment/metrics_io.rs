use std::path::Path;

use crate::error::{Error, Result};
use crate::orchestrator::{MetricsRecord, METRIC_COLUMNS};

/// Column names for a run evaluated at `k_list`.
pub fn metric_columns(k_list: &[usize]) -> Vec<String> {
    METRIC_COLUMNS
        .iter()
        .map(|c| c.to_string())
        .chain(k_list.iter().map(|k| format!("pass_at_{k}")))
        .collect()
}

/// Writes one row per iteration. Missing Pass@k cells are left empty.
pub fn write_metrics_csv(path: &Path, k_list: &[usize], rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(metric_columns(k_list))?;
    for r in rows {
        let mut record = vec![
            r.iter.to_string(),
            r.mean_reward.to_string(),
            r.entropy.to_string(),
            r.kl_to_vllm.to_string(),
            r.v_hat_mean.to_string(),
            r.loss.to_string(),
            r.grad_norm.to_string(),
            r.snapshot_version.to_string(),
        ];
        record.extend(
            r.pass_at_k
                .iter()
                .map(|v| v.map_or_else(String::new, |x| x.to_string())),
        );
        w.write_record(&record)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// A metrics file read back as numbers. Empty cells are `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let columns: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        for (i, expected) in METRIC_COLUMNS.iter().enumerate() {
            if columns.get(i).map(String::as_str) != Some(*expected) {
                return Err(Error::SchemaMismatch {
                    column: expected.to_string(),
                    path: path.to_path_buf(),
                });
            }
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let row = rec
                .iter()
                .zip(&columns)
                .map(|(cell, col)| {
                    if cell.is_empty() {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|_| Error::SchemaMismatch {
                            column: col.clone(),
                            path: path.to_path_buf(),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        Ok(MetricsTable { columns, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<Option<f64>>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }
}
