//! Tidy CSV for plotting: one `(variant, seed, step, metric, value)` row
//! per observation.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::config::Run;
use crate::error::{LabError, Result};
use crate::eval::{report_path, EvalReport};
use crate::runner::{metrics_path, MetricsLine};

pub const HEADER: [&str; 5] = ["variant", "seed", "step", "metric", "value"];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Row {
    pub variant: String,
    pub seed: u64,
    /// Empty for end-of-run summaries such as winrate.
    pub step: Option<u64>,
    pub metric: &'static str,
    pub value: f64,
}

/// Reads a metrics file, naming the offending line on any parse error.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsLine>> {
    let file = File::open(path).map_err(LabError::io(path))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(LabError::io(path))?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str(&line).map_err(|e| LabError::Malformed {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(parsed);
    }
    Ok(out)
}

pub fn metric_rows(lines: &[MetricsLine]) -> Vec<Row> {
    lines
        .iter()
        .flat_map(|l| {
            let m = &l.metrics;
            [
                ("mean_reward", m.mean_reward),
                ("loss", m.loss),
                ("grad_norm", m.grad_norm),
                ("kl", m.kl),
                ("batch_reward", m.batch_reward),
            ]
            .map(|(metric, value)| Row {
                variant: l.label.clone(),
                seed: m.seed,
                step: Some(m.step),
                metric,
                value,
            })
        })
        .collect()
}

pub fn read_report(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(LabError::io(path))?;
    serde_json::from_str(&text).map_err(|e| LabError::Malformed {
        path: path.to_path_buf(),
        line: e.line(),
        msg: e.to_string(),
    })
}

pub fn report_rows(report: &EvalReport) -> Vec<Row> {
    report
        .seeds
        .iter()
        .flat_map(|s| {
            [("winrate", s.result.winrate), ("pass_rate", s.result.pass_rate)].map(|(metric, value)| Row {
                variant: report.label.clone(),
                seed: s.seed,
                step: None,
                metric,
                value,
            })
        })
        .collect()
}

pub fn write_csv(rows: &[Row], writer: impl Write) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(writer);
    w.write_record(HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| LabError::Csv(e.into()))?;
    Ok(())
}

/// Collects every metrics file and eval report the runs produced under
/// `out`; a run with no metrics at all is an error.
pub fn collect(runs: &[Run], only_seed: Option<u64>, out: &Path) -> Result<Vec<Row>> {
    let mut rows = Vec::new();
    for run in runs {
        let paths: Vec<PathBuf> = run
            .config
            .seeds
            .iter()
            .filter(|&&s| only_seed.is_none_or(|o| o == s))
            .map(|&s| metrics_path(out, &run.label, s))
            .collect();
        for p in &paths {
            if !p.exists() {
                return Err(LabError::Config(format!("missing metrics {}; run `train` first", p.display())));
            }
            rows.extend(metric_rows(&read_metrics(p)?));
        }
        let report = report_path(out, &run.label);
        if report.exists() {
            rows.extend(report_rows(&read_report(&report)?).into_iter().filter(|r| only_seed.is_none_or(|o| o == r.seed)));
        }
    }
    Ok(rows)
}

pub fn csv_path(out: &Path) -> PathBuf {
    out.join("plot-data.csv")
}
