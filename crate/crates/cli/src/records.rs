//! Files that record a run: metrics lines, summary tables and loss curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use cycda::pipeline::{AblationCase, CycleState, Stage, StageRecord};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// One line of a metrics file.
///
/// Each stage emits one record per epoch with the epoch-mean loss
/// components, then one record with `epoch: null` holding its end-of-stage
/// scalars (test accuracy, pseudo-label count and accuracy).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub stage: Stage,
    pub iteration: usize,
    pub epoch: Option<usize>,
    pub metrics: BTreeMap<String, f64>,
    /// Seconds since the start of the run when the record was written.
    pub wall_clock_s: f64,
}

impl MetricsRecord {
    pub fn from_stage(run_id: &str, record: &StageRecord, wall_clock_s: f64) -> Vec<MetricsRecord> {
        let base = |epoch, metrics: &BTreeMap<String, f64>| MetricsRecord {
            run_id: run_id.to_string(),
            stage: record.stage,
            iteration: record.iteration,
            epoch,
            metrics: metrics.clone(),
            wall_clock_s,
        };
        let mut out: Vec<MetricsRecord> = record.epochs.iter().map(|e| base(Some(e.epoch), &e.metrics)).collect();
        out.push(base(None, &record.metrics));
        out
    }
}

/// Append-only JSON-lines writer for one run.
pub struct MetricsWriter {
    out: BufWriter<File>,
    path: PathBuf,
}

impl MetricsWriter {
    pub fn create(path: &Path) -> Result<Self, CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
        }
        let file = File::create(path).map_err(CliError::io(path))?;
        Ok(Self {
            out: BufWriter::new(file),
            path: path.to_path_buf(),
        })
    }

    pub fn write(&mut self, record: &MetricsRecord) -> Result<(), CliError> {
        let line = serde_json::to_string(record).expect("metrics records serialize");
        writeln!(self.out, "{line}").map_err(CliError::io(&self.path))
    }

    pub fn finish(mut self) -> Result<(), CliError> {
        self.out.flush().map_err(CliError::io(&self.path))
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>, CliError> {
    let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| CliError::Validation(format!("{}: {e}", path.display()))))
        .collect()
}

/// Columns of the summary table, taken from the last stage of a run.
pub const SUMMARY_METRICS: [&str; 4] = [
    "test_accuracy",
    "confusable_accuracy",
    "pseudo_label_accuracy",
    "pseudo_label_count",
];

/// Final metrics of one seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub seed: u64,
    pub final_stage: Stage,
    pub values: Vec<Option<f64>>,
}

impl SummaryRow {
    pub fn from_state(seed: u64, state: &CycleState) -> Self {
        let last = state.history.last().expect("a run records at least one stage");
        Self {
            seed,
            final_stage: last.stage,
            values: SUMMARY_METRICS.iter().map(|m| last.metric(m)).collect(),
        }
    }
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{v:.6}"))
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = values.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

/// Tab-separated table with one row per seed and a final mean row. Wall
/// clock is not part of it, so equal runs give equal bytes.
pub fn summary_table(case: AblationCase, n_iterations: usize, rows: &[SummaryRow]) -> String {
    let mut s = String::new();
    writeln!(s, "# case {case} ({}), {n_iterations} iteration(s)", case.describe()).unwrap();
    writeln!(s, "seed\tfinal_stage\t{}", SUMMARY_METRICS.join("\t")).unwrap();
    for r in rows {
        let cells: Vec<String> = r.values.iter().map(|&v| cell(v)).collect();
        writeln!(s, "{}\t{}\t{}", r.seed, r.final_stage, cells.join("\t")).unwrap();
    }
    let means: Vec<String> = (0..SUMMARY_METRICS.len())
        .map(|i| cell(mean(rows.iter().map(|r| r.values[i]))))
        .collect();
    writeln!(s, "mean\t-\t{}", means.join("\t")).unwrap();
    s
}

/// Loss curves as gnuplot data blocks, one block per stage execution,
/// addressable with `index N`.
pub fn gnuplot_curves(run_id: &str, history: &[StageRecord]) -> String {
    let mut s = format!("# {run_id}: one block per stage, select with `index N`\n");
    for (i, record) in history.iter().enumerate() {
        let names = record.loss_names();
        if i > 0 {
            s.push_str("\n\n");
        }
        writeln!(s, "# index {i}: {} iteration {}", record.stage, record.iteration).unwrap();
        writeln!(s, "# epoch {}", names.join(" ")).unwrap();
        for e in &record.epochs {
            let cells: Vec<String> = names
                .iter()
                .map(|n| e.metrics.get(n).map_or("NaN".to_string(), |v| format!("{v:.9e}")))
                .collect();
            writeln!(s, "{} {}", e.epoch, cells.join(" ")).unwrap();
        }
    }
    s
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    }
    std::fs::write(path, contents).map_err(CliError::io(path))
}
