//! metrics.csv, metrics.json and history.csv writers.

use std::path::Path;

use serde::Serialize;
use vitforge_core::metrics::MetricsRow;
use vitforge_core::train::EpochRecord;

use crate::error::CliError;

pub const METRICS_HEADER: [&str; 7] = [
    "fold",
    "accuracy",
    "precision",
    "sensitivity",
    "f1",
    "specificity",
    "auc",
];
pub const HISTORY_HEADER: [&str; 3] = ["epoch", "train_loss", "val_accuracy"];

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    let source = match e.into_kind() {
        csv::ErrorKind::Io(io) => io,
        other => std::io::Error::other(format!("{other:?}")),
    };
    CliError::output(path, source)
}

fn write_csv<I>(path: &Path, header: &[&str], records: I) -> Result<(), CliError>
where
    I: IntoIterator<Item = Vec<String>>,
{
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in records {
        w.write_record(&r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| CliError::output(path, e))
}

pub fn metrics_record(row: &MetricsRow) -> Vec<String> {
    vec![
        row.fold.clone(),
        row.accuracy.to_string(),
        row.precision.to_string(),
        row.sensitivity.to_string(),
        row.f1.to_string(),
        row.specificity.to_string(),
        row.auc.map(|a| a.to_string()).unwrap_or_default(),
    ]
}

pub fn write_metrics_csv<'a>(
    path: &Path,
    rows: impl IntoIterator<Item = &'a MetricsRow>,
) -> Result<(), CliError> {
    write_csv(path, &METRICS_HEADER, rows.into_iter().map(metrics_record))
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<(), CliError> {
    write_csv(
        path,
        &HISTORY_HEADER,
        history.iter().map(|r| {
            vec![
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_accuracy.to_string(),
            ]
        }),
    )
}

#[derive(Serialize)]
pub struct JsonReport<'a> {
    pub command: &'a str,
    pub seed: u64,
    pub num_classes: usize,
    pub classes: &'a [String],
    /// Binary runs only.
    pub positive_class: Option<&'a str>,
    pub rows: Vec<&'a MetricsRow>,
}

pub fn write_json(path: &Path, report: &JsonReport<'_>) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(report).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::output(path, e))
}

/// Fixed-width table for the terminal.
pub fn format_table<'a>(rows: impl IntoIterator<Item = &'a MetricsRow>) -> String {
    let mut out = format!(
        "{:<10} {:>9} {:>9} {:>11} {:>9} {:>11} {:>9}\n",
        "fold", "accuracy", "precision", "sensitivity", "f1", "specificity", "auc"
    );
    for r in rows {
        let auc = r.auc.map(|a| format!("{a:.4}")).unwrap_or_else(|| "-".into());
        out += &format!(
            "{:<10} {:>9.4} {:>9.4} {:>11.4} {:>9.4} {:>11.4} {:>9}\n",
            r.fold, r.accuracy, r.precision, r.sensitivity, r.f1, r.specificity, auc
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(fold: &str, auc: Option<f64>) -> MetricsRow {
        MetricsRow {
            fold: fold.into(),
            accuracy: 0.5,
            precision: 1.0,
            sensitivity: 0.25,
            f1: 0.4,
            specificity: 0.75,
            auc,
            degenerate: false,
        }
    }

    #[test]
    fn metrics_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_metrics_csv(&path, &[row("fold1", Some(0.625)), row("average", None)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(
            text,
            "fold,accuracy,precision,sensitivity,f1,specificity,auc\n\
             fold1,0.5,1,0.25,0.4,0.75,0.625\n\
             average,0.5,1,0.25,0.4,0.75,\n"
        );
    }

    #[test]
    fn history_csv_layout() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.csv");
        let h = [EpochRecord {
            epoch: 1,
            train_loss: 0.75,
            val_accuracy: 0.5,
        }];
        write_history_csv(&path, &h).unwrap();
        assert_eq!(
            std::fs::read_to_string(&path).unwrap(),
            "epoch,train_loss,val_accuracy\n1,0.75,0.5\n"
        );
    }

    #[test]
    fn unwritable_path_is_an_output_error() {
        let dir = tempfile::tempdir().unwrap();
        let err = write_metrics_csv(&dir.path().join("missing/m.csv"), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 6);
    }
}
