//! Aggregation of finished runs into plain CSV tables.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::Serialize;
use stylebridge::engine::MetricsRow;

use crate::config::read_json;
use crate::error::{CliError, CliResult};
use crate::run::{Summary, METRICS_FILE, SUMMARY_FILE};

pub const DOMAIN_TABLE: &str = "domain_errors.csv";
pub const LOSS_TABLE: &str = "loss_traces.csv";

#[derive(Debug, PartialEq, Serialize)]
pub struct DomainLine {
    pub domain: String,
    pub runs: usize,
    pub mean_error: f64,
    /// Sample standard deviation across runs; zero for a single run.
    pub std_error: f64,
}

#[derive(Serialize)]
struct TraceLine<'a> {
    run: &'a str,
    step: u64,
    domain: String,
    batch_error: f64,
    loss_pce: Option<f64>,
    loss_scl: Option<f64>,
    loss_st: Option<f64>,
    loss_total: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-domain rows in the first run's order, then a `mean` row over the
/// runs' overall errors. Runs must cover the same domains.
pub fn domain_table(summaries: &[Summary]) -> CliResult<Vec<DomainLine>> {
    let Some(first) = summaries.first() else {
        return Err(CliError::usage("report needs at least one run"));
    };
    let mut domains: Vec<&str> = first.per_domain.iter().map(|d| d.domain.as_str()).collect();
    domains.sort_unstable();
    for s in &summaries[1..] {
        let mut other: Vec<&str> = s.per_domain.iter().map(|d| d.domain.as_str()).collect();
        other.sort_unstable();
        if other != domains {
            return Err(CliError::usage("incomparable runs: domain sets differ"));
        }
    }
    let mut lines = Vec::with_capacity(first.per_domain.len() + 1);
    for d in &first.per_domain {
        let errs: Vec<f64> = summaries
            .iter()
            .map(|s| {
                s.per_domain
                    .iter()
                    .find(|x| x.domain == d.domain)
                    .expect("domain sets match")
                    .mean_error
            })
            .collect();
        let (mean_error, std_error) = mean_std(&errs);
        lines.push(DomainLine {
            domain: d.domain.clone(),
            runs: errs.len(),
            mean_error,
            std_error,
        });
    }
    let overall: Vec<f64> = summaries.iter().map(|s| s.mean_error).collect();
    let (mean_error, std_error) = mean_std(&overall);
    lines.push(DomainLine {
        domain: "mean".into(),
        runs: overall.len(),
        mean_error,
        std_error,
    });
    Ok(lines)
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    CliError::data(format!("{}: {e}", path.display()))
}

pub fn write_reports(runs: &[PathBuf], out: &Path) -> CliResult<()> {
    let mut summaries = Vec::with_capacity(runs.len());
    for dir in runs {
        summaries.push(read_json::<Summary>(&dir.join(SUMMARY_FILE))?);
    }
    let lines = domain_table(&summaries)?;
    let path = out.join(DOMAIN_TABLE);
    let mut w = csv::Writer::from_writer(File::create(&path).map_err(|e| CliError::io(&path, e))?);
    for line in &lines {
        w.serialize(line).map_err(|e| csv_err(&path, e))?;
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;

    let trace_path = out.join(LOSS_TABLE);
    let file = File::create(&trace_path).map_err(|e| CliError::io(&trace_path, e))?;
    let mut w = csv::Writer::from_writer(file);
    for dir in runs {
        let metrics = dir.join(METRICS_FILE);
        let mut r = csv::Reader::from_path(&metrics).map_err(|e| csv_err(&metrics, e))?;
        let run = dir.display().to_string();
        for row in r.deserialize::<MetricsRow>() {
            let row = row.map_err(|e| csv_err(&metrics, e))?;
            w.serialize(TraceLine {
                run: &run,
                step: row.step,
                domain: format!("{}@{}", row.domain_kind, row.severity),
                batch_error: row.batch_error,
                loss_pce: row.loss_pce,
                loss_scl: row.loss_scl,
                loss_st: row.loss_st,
                loss_total: row.loss_total,
            })
            .map_err(|e| csv_err(&trace_path, e))?;
        }
    }
    w.flush().map_err(|e| CliError::io(&trace_path, e))
}
