//! CSV/JSON outputs. Every file is written to a temporary sibling and
//! renamed into place.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::entropy::EntropyReport;
use crate::error::{Error, Result};

/// One row of the training-history CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub epoch: usize,
    /// One-based.
    pub layer: usize,
    pub loss_kind: String,
    pub split: String,
    pub loss: f64,
    /// Empty for models without goodness or batches without that polarity.
    pub mean_goodness_pos: Option<f64>,
    pub mean_goodness_neg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingHistory {
    pub rows: Vec<HistoryRow>,
    /// Loss of each layer's last training epoch, if it was trained.
    pub layer_final_loss: Vec<Option<f64>>,
}

impl TrainingHistory {
    pub fn new(depth: usize) -> Self {
        TrainingHistory {
            rows: Vec::new(),
            layer_final_loss: vec![None; depth],
        }
    }

    /// Mean loss per epoch over the rows for `layer` (one-based).
    pub fn layer_losses(&self, layer: usize) -> Vec<f64> {
        self.rows.iter().filter(|r| r.layer == layer).map(|r| r.loss).collect()
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Serialises rows with a header derived from the row type.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Writes explicit header and records.
pub fn write_csv_records(path: &Path, header: &[String], records: &[Vec<String>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in records {
        w.write_record(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn write_history(path: &Path, history: &TrainingHistory) -> Result<()> {
    write_csv(path, &history.rows)
}

/// Entropy measured after a given epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EntropySnapshot {
    pub epoch: usize,
    pub report: EntropyReport,
}

/// `epoch, split, overall, across_layers, within_layer_1..k`.
pub fn write_entropy_trajectory(path: &Path, snapshots: &[EntropySnapshot]) -> Result<()> {
    let depth = snapshots.iter().map(|s| s.report.within_layer.len()).max().unwrap_or(0);
    let mut header: Vec<String> = ["epoch", "split", "overall", "across_layers"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=depth).map(|i| format!("within_layer_{i}")));
    let records: Vec<Vec<String>> = snapshots
        .iter()
        .map(|s| {
            let mut r = vec![
                s.epoch.to_string(),
                s.report.split.to_string(),
                format!("{:?}", s.report.overall),
                format!("{:?}", s.report.across_layers),
            ];
            r.extend(s.report.within_layer.iter().map(|v| format!("{v:?}")));
            r
        })
        .collect();
    write_csv_records(path, &header, &records)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entropy::EntropySplit;

    #[test]
    fn history_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let history = TrainingHistory {
            rows: vec![HistoryRow {
                epoch: 1,
                layer: 2,
                loss_kind: "sigmoid_goodness".into(),
                split: "train".into(),
                loss: 0.5,
                mean_goodness_pos: Some(3.0),
                mean_goodness_neg: None,
            }],
            layer_final_loss: vec![Some(0.5)],
        };
        write_history(&path, &history).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "epoch,layer,loss_kind,split,loss,mean_goodness_pos,mean_goodness_neg"
        );
        assert_eq!(text.lines().nth(1).unwrap(), "1,2,sigmoid_goodness,train,0.5,3.0,");
        // no temp files left behind
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    #[test]
    fn entropy_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.csv");
        let snap = EntropySnapshot {
            epoch: 3,
            report: EntropyReport {
                overall: 1.5,
                across_layers: 0.5,
                within_layer: vec![1.0, 0.5, 1.5],
                sample_count: 10,
                split: EntropySplit::Both,
            },
        };
        write_entropy_trajectory(&path, &[snap]).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(
            lines.next().unwrap(),
            "epoch,split,overall,across_layers,within_layer_1,within_layer_2,within_layer_3"
        );
        assert_eq!(lines.next().unwrap(), "3,both,1.5,0.5,1.0,0.5,1.5");
    }
}
