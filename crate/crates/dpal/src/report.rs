//! JSON-lines run logs and CSV summaries.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use dpal_core::engine::{BatchRecord, EpochLog, RunReport};

use crate::container::write_atomic;
use crate::CliError;

/// Identifies one adaptation run.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub corruption: String,
    pub severity: u8,
    pub mode: String,
    pub seed: u64,
}

impl Cell {
    /// File stem, with characters unsafe in file names replaced.
    pub fn stem(&self) -> String {
        let mode: String = self
            .mode
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '_' { c } else { '_' })
            .collect();
        format!("{}_s{}_{}_seed{}", self.corruption, self.severity, mode.trim_end_matches('_'), self.seed)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchLine {
    pub t: u64,
    pub loss: f64,
    pub entropy: f64,
    pub similarity: f64,
    pub lambda: f64,
    pub selected: usize,
    pub batch_size: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub skipped: bool,
}

impl From<&BatchRecord> for BatchLine {
    fn from(r: &BatchRecord) -> Self {
        Self {
            t: r.t,
            loss: r.loss,
            entropy: r.entropy,
            similarity: r.similarity,
            lambda: r.lambda,
            selected: r.selected,
            batch_size: r.batch_size,
            correct: r.correct,
            accuracy: r.accuracy(),
            skipped: r.skipped,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    #[serde(flatten)]
    pub cell: Cell,
    pub accuracy: f64,
    pub correct: usize,
    pub total: usize,
    pub mean_l_e: f64,
    pub mean_l_s: f64,
    pub mean_lambda: f64,
    pub wall_seconds: f64,
    pub backbone_checksum: String,
    pub config: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LogLine {
    Batch(BatchLine),
    Summary(RunSummary),
}

pub fn summarize(cell: Cell, report: &RunReport, wall_seconds: f64, config: BTreeMap<String, String>) -> RunSummary {
    RunSummary {
        cell,
        accuracy: report.accuracy,
        correct: report.correct,
        total: report.total,
        mean_l_e: report.mean_entropy(),
        mean_l_s: report.mean_similarity(),
        mean_lambda: report.mean_lambda(),
        wall_seconds,
        backbone_checksum: format!("{:016x}", report.backbone_checksum),
        config,
    }
}

pub fn run_path(dir: &Path, cell: &Cell) -> PathBuf {
    dir.join(format!("{}.jsonl", cell.stem()))
}

/// Writes one run log, batch lines then the summary line, atomically.
pub fn write_run(path: &Path, report: &RunReport, summary: &RunSummary) -> Result<(), CliError> {
    let mut text = String::new();
    let lines = report
        .records
        .iter()
        .map(|r| LogLine::Batch(r.into()))
        .chain(std::iter::once(LogLine::Summary(summary.clone())));
    for line in lines {
        text.push_str(&serde_json::to_string(&line).map_err(|e| CliError::Format(e.to_string()))?);
        text.push('\n');
    }
    write_atomic(path, text.as_bytes()).map_err(|e| CliError::io(path, e))
}

/// The summary of a finished run log, or `None` if the log is incomplete.
pub fn read_summary(path: &Path) -> Result<Option<RunSummary>, CliError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let Some(last) = text.lines().filter(|l| !l.trim().is_empty()).last() else {
        return Ok(None);
    };
    match serde_json::from_str::<LogLine>(last) {
        Ok(LogLine::Summary(s)) => Ok(Some(s)),
        _ => Ok(None),
    }
}

/// Every completed run log in `dir`, sorted by cell.
pub fn collect_runs(dir: &Path) -> Result<Vec<RunSummary>, CliError> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(e) => e,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(CliError::io(dir, e)),
    };
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|x| x == "jsonl") {
            if let Some(s) = read_summary(&path)? {
                out.push(s);
            }
        }
    }
    out.sort_by(|a, b| a.cell.cmp(&b.cell));
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunRow {
    pub corruption: String,
    pub severity: u8,
    pub mode: String,
    pub seed: u64,
    pub accuracy: f64,
    pub mean_l_e: f64,
    pub mean_l_s: f64,
    pub mean_lambda: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub corruption: String,
    pub severity: u8,
    pub mode: String,
    pub seeds: usize,
    pub accuracy_mean: f64,
    pub accuracy_std: f64,
    pub mean_l_e: f64,
    pub mean_l_s: f64,
    pub mean_lambda: f64,
    pub wall_seconds: f64,
}

/// Mean and sample standard deviation; the deviation of one value is 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// One row per (corruption, severity, mode), aggregated over seeds.
pub fn aggregate(runs: &[RunSummary]) -> Vec<SummaryRow> {
    let mut cells: BTreeMap<(String, u8, String), Vec<&RunSummary>> = BTreeMap::new();
    for r in runs {
        cells
            .entry((r.cell.corruption.clone(), r.cell.severity, r.cell.mode.clone()))
            .or_default()
            .push(r);
    }
    cells
        .into_iter()
        .map(|((corruption, severity, mode), rs)| {
            let acc: Vec<f64> = rs.iter().map(|r| r.accuracy).collect();
            let (accuracy_mean, accuracy_std) = mean_std(&acc);
            let avg = |f: fn(&RunSummary) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / rs.len() as f64;
            SummaryRow {
                corruption,
                severity,
                mode,
                seeds: rs.len(),
                accuracy_mean,
                accuracy_std,
                mean_l_e: avg(|r| r.mean_l_e),
                mean_l_s: avg(|r| r.mean_l_s),
                mean_lambda: avg(|r| r.mean_lambda),
                wall_seconds: avg(|r| r.wall_seconds),
            }
        })
        .collect()
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>, CliError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| CliError::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| CliError::Format(e.to_string()))
}

/// Writes rows as CSV with a header derived from the row type. An empty
/// table gets the given header only.
pub fn write_csv<T: Serialize>(path: &Path, rows: &[T], header: &[&str]) -> Result<(), CliError> {
    let bytes = if rows.is_empty() {
        let mut h = header.join(",");
        h.push('\n');
        h.into_bytes()
    } else {
        csv_bytes(rows)?
    };
    write_atomic(path, &bytes).map_err(|e| CliError::io(path, e))
}

pub const RUN_HEADER: &[&str] = &[
    "corruption",
    "severity",
    "mode",
    "seed",
    "accuracy",
    "mean_l_e",
    "mean_l_s",
    "mean_lambda",
    "wall_seconds",
];

pub const SUMMARY_HEADER: &[&str] = &[
    "corruption",
    "severity",
    "mode",
    "seeds",
    "accuracy_mean",
    "accuracy_std",
    "mean_l_e",
    "mean_l_s",
    "mean_lambda",
    "wall_seconds",
];

/// Rewrites `runs.csv` and `summary.csv` in `out` from the run logs in `runs_dir`.
pub fn write_reports(runs_dir: &Path, out: &Path) -> Result<(Vec<RunSummary>, Vec<SummaryRow>), CliError> {
    let runs = collect_runs(runs_dir)?;
    let rows: Vec<RunRow> = runs
        .iter()
        .map(|r| RunRow {
            corruption: r.cell.corruption.clone(),
            severity: r.cell.severity,
            mode: r.cell.mode.clone(),
            seed: r.cell.seed,
            accuracy: r.accuracy,
            mean_l_e: r.mean_l_e,
            mean_l_s: r.mean_l_s,
            mean_lambda: r.mean_lambda,
            wall_seconds: r.wall_seconds,
        })
        .collect();
    write_csv(&out.join("runs.csv"), &rows, RUN_HEADER)?;
    let summary = aggregate(&runs);
    write_csv(&out.join("summary.csv"), &summary, SUMMARY_HEADER)?;
    Ok((runs, summary))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub mean_loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: Option<f64>,
    pub lr: f64,
}

impl From<&EpochLog> for EpochRow {
    fn from(l: &EpochLog) -> Self {
        Self {
            epoch: l.epoch,
            mean_loss: l.mean_loss,
            train_accuracy: l.train_accuracy,
            test_accuracy: l.test_accuracy,
            lr: l.lr,
        }
    }
}

pub const EPOCH_HEADER: &[&str] = &["epoch", "mean_loss", "train_accuracy", "test_accuracy", "lr"];

#[cfg(test)]
mod tests {
    use super::*;

    fn summary(corruption: &str, mode: &str, seed: u64, accuracy: f64) -> RunSummary {
        RunSummary {
            cell: Cell {
                corruption: corruption.into(),
                severity: 3,
                mode: mode.into(),
                seed,
            },
            accuracy,
            correct: 0,
            total: 0,
            mean_l_e: 0.5,
            mean_l_s: -0.2,
            mean_lambda: 1.0,
            wall_seconds: 1.0,
            backbone_checksum: "0".into(),
            config: BTreeMap::new(),
        }
    }

    #[test]
    fn aggregate_counts_cells() {
        let mut runs = Vec::new();
        for c in ["a", "b", "c", "d", "e", "f"] {
            for m in ["frozen", "dpal_full"] {
                for s in 0..3 {
                    runs.push(summary(c, m, s, 0.5 + s as f64 * 0.1));
                }
            }
        }
        assert_eq!(runs.len(), 36);
        let rows = aggregate(&runs);
        assert_eq!(rows.len(), 12);
        assert!((rows[0].accuracy_mean - 0.6).abs() < 1e-12);
        assert!((rows[0].accuracy_std - 0.1).abs() < 1e-12);
    }

    #[test]
    fn single_seed_has_zero_spread() {
        let rows = aggregate(&[summary("a", "frozen", 0, 0.7)]);
        assert_eq!(rows[0].accuracy_std, 0.0);
        assert_eq!(mean_std(&[]), (0.0, 0.0));
    }

    #[test]
    fn stems_are_file_safe() {
        let c = Cell {
            corruption: "gaussian_noise".into(),
            severity: 3,
            mode: "dpal_smooth_pred(0.2)".into(),
            seed: 1,
        };
        assert_eq!(c.stem(), "gaussian_noise_s3_dpal_smooth_pred_0.2_seed1");
    }

    #[test]
    fn incomplete_logs_are_not_counted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.jsonl");
        fs::write(&p, "{\"type\":\"batch\",\"t\":1}\n").unwrap();
        assert_eq!(read_summary(&p).unwrap(), None);
        fs::write(&p, "garbage").unwrap();
        assert_eq!(read_summary(&p).unwrap(), None);
        assert_eq!(read_summary(&dir.path().join("missing.jsonl")).unwrap(), None);
        let s = summary("a", "frozen", 0, 0.7);
        fs::write(&p, serde_json::to_string(&LogLine::Summary(s.clone())).unwrap() + "\n").unwrap();
        assert_eq!(read_summary(&p).unwrap(), Some(s));
        assert_eq!(collect_runs(dir.path()).unwrap().len(), 1);
    }

    #[test]
    fn empty_tables_keep_their_header() {
        let dir = tempfile::tempdir().unwrap();
        let (runs, rows) = write_reports(&dir.path().join("runs"), dir.path()).unwrap();
        assert!(runs.is_empty() && rows.is_empty());
        let text = fs::read_to_string(dir.path().join("summary.csv")).unwrap();
        assert!(text.starts_with("corruption,severity,mode,seeds,accuracy_mean"));
    }
}
