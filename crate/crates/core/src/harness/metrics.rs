//! Per-run metrics as CSV under a versioned comment header. List-valued
//! columns are `;`-separated; absent scalars are empty, absent list
//! entries are `-`; floats are written in shortest round-trip form.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{IterationMetrics, Order};

use super::eval::EpochSummary;

pub const METRICS_HEADER: &str = "# maml-metrics v1";

/// Placeholder for a step without a target loss.
const MISSING: &str = "-";

pub const COLUMNS: [&str; 19] = [
    "kind",
    "run_id",
    "seed",
    "epoch",
    "iteration",
    "loss",
    "support_losses",
    "target_losses",
    "accuracy",
    "lr",
    "order",
    "loss_weights",
    "grad_norm",
    "wall_ms",
    "backward_nodes",
    "val_accuracy",
    "val_std_error",
    "val_loss",
    "note",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecordKind {
    Iteration,
    Epoch,
    Diverged,
}

impl RecordKind {
    fn as_str(self) -> &'static str {
        match self {
            RecordKind::Iteration => "iteration",
            RecordKind::Epoch => "epoch",
            RecordKind::Diverged => "diverged",
        }
    }
}

/// One row. Iteration rows fill the training columns, epoch rows the
/// validation columns, diverged rows the loss breakdown.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub kind: RecordKind,
    pub run_id: String,
    pub seed: u64,
    pub epoch: usize,
    pub iteration: usize,
    pub loss: Option<f64>,
    pub support_losses: Vec<f64>,
    pub target_losses: Vec<Option<f64>>,
    pub accuracy: Option<f64>,
    pub lr: Option<f64>,
    pub order: Option<Order>,
    pub loss_weights: Vec<f64>,
    pub grad_norm: Option<f64>,
    pub wall_ms: Option<f64>,
    pub backward_nodes: Option<usize>,
    pub val_accuracy: Option<f64>,
    pub val_std_error: Option<f64>,
    pub val_loss: Option<f64>,
    pub note: String,
}

impl MetricsRecord {
    fn blank(kind: RecordKind, run_id: &str, seed: u64, epoch: usize, iteration: usize) -> Self {
        Self {
            kind,
            run_id: run_id.to_string(),
            seed,
            epoch,
            iteration,
            loss: None,
            support_losses: Vec::new(),
            target_losses: Vec::new(),
            accuracy: None,
            lr: None,
            order: None,
            loss_weights: Vec::new(),
            grad_norm: None,
            wall_ms: None,
            backward_nodes: None,
            val_accuracy: None,
            val_std_error: None,
            val_loss: None,
            note: String::new(),
        }
    }

    pub fn iteration(run_id: &str, seed: u64, m: &IterationMetrics) -> Self {
        let mut weights = vec![0.0; m.loss_weights.first_step];
        weights.extend_from_slice(&m.loss_weights.weights);
        Self {
            loss: Some(m.loss),
            support_losses: m.support_losses.clone(),
            target_losses: m.target_losses.clone(),
            accuracy: Some(m.accuracy),
            lr: Some(m.lr),
            order: Some(m.order),
            loss_weights: weights,
            grad_norm: Some(m.grad_norm),
            wall_ms: Some(m.wall_ms),
            backward_nodes: Some(m.backward_nodes),
            ..Self::blank(RecordKind::Iteration, run_id, seed, m.epoch, m.iteration)
        }
    }

    pub fn epoch(run_id: &str, seed: u64, s: &EpochSummary) -> Self {
        Self {
            val_accuracy: Some(s.accuracy),
            val_std_error: Some(s.std_error),
            val_loss: Some(s.loss),
            ..Self::blank(RecordKind::Epoch, run_id, seed, s.epoch, s.iteration)
        }
    }

    pub fn diverged(
        run_id: &str,
        seed: u64,
        epoch: usize,
        iteration: usize,
        per_step: &[f64],
        note: &str,
    ) -> Self {
        Self {
            target_losses: per_step.iter().map(|&v| Some(v)).collect(),
            note: note.to_string(),
            ..Self::blank(RecordKind::Diverged, run_id, seed, epoch, iteration)
        }
    }

    fn to_row(&self) -> Vec<String> {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:?}")).unwrap_or_default();
        let list = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:?}"))
                .collect::<Vec<_>>()
                .join(";")
        };
        vec![
            self.kind.as_str().to_string(),
            self.run_id.clone(),
            self.seed.to_string(),
            self.epoch.to_string(),
            self.iteration.to_string(),
            opt(self.loss),
            list(&self.support_losses),
            self.target_losses
                .iter()
                .map(|v| v.map_or_else(|| MISSING.to_string(), |x| format!("{x:?}")))
                .collect::<Vec<_>>()
                .join(";"),
            opt(self.accuracy),
            opt(self.lr),
            self.order
                .map(|o| o.as_str().to_string())
                .unwrap_or_default(),
            list(&self.loss_weights),
            opt(self.grad_norm),
            opt(self.wall_ms),
            self.backward_nodes
                .map(|n| n.to_string())
                .unwrap_or_default(),
            opt(self.val_accuracy),
            opt(self.val_std_error),
            opt(self.val_loss),
            self.note.clone(),
        ]
    }

    fn from_row(row: &csv::StringRecord) -> Result<Self> {
        if row.len() != COLUMNS.len() {
            return Err(Error::Structure(format!(
                "metrics row has {} columns, expected {}",
                row.len(),
                COLUMNS.len()
            )));
        }
        let bad = |col: &str, v: &str| {
            Error::Structure(format!("metrics column {col}: cannot parse {v:?}"))
        };
        let f = |i: usize| -> Result<Option<f64>> {
            let v = &row[i];
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse().map(Some).map_err(|_| bad(COLUMNS[i], v))
            }
        };
        let list = |i: usize| -> Result<Vec<Option<f64>>> {
            if row[i].is_empty() {
                return Ok(Vec::new());
            }
            row[i]
                .split(';')
                .map(|v| {
                    if v == MISSING {
                        Ok(None)
                    } else {
                        v.parse().map(Some).map_err(|_| bad(COLUMNS[i], v))
                    }
                })
                .collect()
        };
        let dense = |i: usize| -> Result<Vec<f64>> {
            list(i)?
                .into_iter()
                .map(|v| v.ok_or_else(|| bad(COLUMNS[i], "empty entry")))
                .collect()
        };
        let int =
            |i: usize| -> Result<u64> { row[i].parse().map_err(|_| bad(COLUMNS[i], &row[i])) };
        let kind = match &row[0] {
            "iteration" => RecordKind::Iteration,
            "epoch" => RecordKind::Epoch,
            "diverged" => RecordKind::Diverged,
            other => return Err(bad("kind", other)),
        };
        Ok(Self {
            kind,
            run_id: row[1].to_string(),
            seed: int(2)?,
            epoch: int(3)? as usize,
            iteration: int(4)? as usize,
            loss: f(5)?,
            support_losses: dense(6)?,
            target_losses: list(7)?,
            accuracy: f(8)?,
            lr: f(9)?,
            order: if row[10].is_empty() {
                None
            } else {
                Some(row[10].parse()?)
            },
            loss_weights: dense(11)?,
            grad_norm: f(12)?,
            wall_ms: f(13)?,
            backward_nodes: if row[14].is_empty() {
                None
            } else {
                Some(int(14)? as usize)
            },
            val_accuracy: f(15)?,
            val_std_error: f(16)?,
            val_loss: f(17)?,
            note: row[18].to_string(),
        })
    }
}

/// Append-only writer; creates the file with its header when missing.
pub struct MetricsWriter {
    out: csv::Writer<File>,
}

impl MetricsWriter {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let mut file = OpenOptions::new().create(true).append(true).open(path)?;
        if fresh {
            writeln!(file, "{METRICS_HEADER}")?;
        }
        let mut out = csv::WriterBuilder::new()
            .has_headers(false)
            .from_writer(file);
        if fresh {
            out.write_record(COLUMNS)?;
        }
        Ok(Self { out })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<()> {
        self.out.write_record(record.to_row())?;
        self.out.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut first = String::new();
    BufReader::new(File::open(path)?).read_line(&mut first)?;
    if first.trim_end() != METRICS_HEADER {
        return Err(Error::Structure(format!(
            "{}: missing {METRICS_HEADER:?} header",
            path.display()
        )));
    }
    let mut rdr = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .has_headers(true)
        .from_path(path)?;
    if rdr.headers()?.iter().ne(COLUMNS) {
        return Err(Error::Structure(format!(
            "{}: unexpected column layout",
            path.display()
        )));
    }
    rdr.records()
        .map(|r| MetricsRecord::from_row(&r?))
        .collect()
}

/// Drops records past `iteration` completed iterations, for resuming.
pub fn truncate_metrics(path: &Path, iteration: usize) -> Result<()> {
    if !path.exists() {
        return Ok(());
    }
    let keep: Vec<MetricsRecord> = read_metrics(path)?
        .into_iter()
        .filter(|r| match r.kind {
            RecordKind::Iteration => r.iteration < iteration,
            _ => r.iteration <= iteration,
        })
        .collect();
    std::fs::remove_file(path)?;
    let mut w = MetricsWriter::open(path)?;
    for r in &keep {
        w.write(r)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta::LossWeights;

    #[test]
    fn records_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let it = IterationMetrics {
            epoch: 2,
            iteration: 17,
            order: Order::Second,
            lr: 0.000_912_345_678_9,
            loss_weights: LossWeights {
                first_step: 1,
                weights: vec![0.1, 0.9],
            },
            loss: 1.0 / 3.0,
            support_losses: vec![1.5, f64::NAN],
            target_losses: vec![None, Some(0.25), Some(1e-300)],
            accuracy: 0.6,
            grad_norm: 12.5,
            wall_ms: 3.25,
            backward_nodes: 99,
        };
        let recs = vec![
            MetricsRecord::iteration("run,1", 4, &it),
            MetricsRecord::epoch(
                "run,1",
                4,
                &EpochSummary {
                    epoch: 2,
                    iteration: 18,
                    accuracy: 0.9,
                    std_error: 0.01,
                    loss: 0.3,
                },
            ),
            MetricsRecord::diverged("run,1", 4, 3, 20, &[f64::NAN, 1.0], "non-finite \"loss\""),
        ];
        let mut w = MetricsWriter::open(&path).unwrap();
        for r in &recs {
            w.write(r).unwrap();
        }
        drop(w);
        let back = read_metrics(&path).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back[0].loss_weights, vec![0.0, 0.1, 0.9]);
        assert_eq!(back[0].lr, recs[0].lr);
        assert!(back[0].support_losses[1].is_nan());
        assert_eq!(back[1], recs[1]);
        assert_eq!(back[0].target_losses, recs[0].target_losses);
        assert_eq!(back[2].note, recs[2].note);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with(METRICS_HEADER));

        truncate_metrics(&path, 17).unwrap();
        let kept = read_metrics(&path).unwrap();
        assert!(kept.is_empty());
    }
}
