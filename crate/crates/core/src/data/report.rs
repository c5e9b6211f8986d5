//! Result bundles: a JSON summary, the objective trace and the fitted
//! matrices as CSV.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{FetrError, Result};
use crate::trainer::{FetrModel, Metrics};
use crate::types::{FetrConfig, TrainReport};

#[derive(Debug, Serialize)]
struct ReportJson<'a> {
    config: &'a FetrConfig,
    iterations: usize,
    converged: bool,
    final_objective: Option<f64>,
    objective_evaluations: usize,
    per_block_seconds: crate::types::BlockSeconds,
    events: &'a [String],
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<&'a Metrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    task_names: Option<&'a [String]>,
}

/// Paths of the files written by [`write_report`].
#[derive(Debug, Clone, PartialEq)]
pub struct ReportFiles {
    pub report: PathBuf,
    pub trace: PathBuf,
    pub sigma1: PathBuf,
    pub sigma2: PathBuf,
    pub weights: PathBuf,
}

impl ReportFiles {
    pub fn for_prefix(prefix: &Path) -> Self {
        let with = |suffix: &str| {
            let mut s = prefix.as_os_str().to_owned();
            s.push(suffix);
            PathBuf::from(s)
        };
        ReportFiles {
            report: with(".report.json"),
            trace: with(".trace.csv"),
            sigma1: with(".sigma1.csv"),
            sigma2: with(".sigma2.csv"),
            weights: with(".weights.csv"),
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| FetrError::io(path, e))
}

/// Writes `<prefix>.report.json`, `.trace.csv`, `.sigma1.csv`, `.sigma2.csv`
/// and `.weights.csv`.
pub fn write_report(
    model: &FetrModel,
    metrics: Option<&Metrics>,
    task_names: Option<&[String]>,
    prefix: &Path,
) -> Result<ReportFiles> {
    let files = ReportFiles::for_prefix(prefix);
    let r = &model.report;
    let json = ReportJson {
        config: &model.config,
        iterations: r.iterations,
        converged: r.converged,
        final_objective: r.final_objective(),
        objective_evaluations: r.objective_evaluations,
        per_block_seconds: r.per_block_seconds,
        events: &r.events,
        metrics,
        task_names,
    };
    let mut out = create(&files.report)?;
    serde_json::to_writer_pretty(&mut out, &json)
        .map_err(|e| FetrError::io(&files.report, e.into()))?;
    out.write_all(b"\n")
        .and_then(|_| out.flush())
        .map_err(|e| FetrError::io(&files.report, e))?;

    write_trace_csv(r, &files.trace)?;
    write_matrix_csv(model.covariances.sigma1(), &files.sigma1)?;
    write_matrix_csv(model.covariances.sigma2(), &files.sigma2)?;
    write_matrix_csv(model.weights.as_matrix(), &files.weights)?;
    Ok(files)
}

/// `iteration,block,seconds,objective`, one row per trace point.
pub fn write_trace_csv(report: &TrainReport, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| FetrError::io(path, e);
    writeln!(out, "iteration,block,seconds,objective").map_err(io)?;
    for p in &report.objective_trace {
        writeln!(out, "{},{},{:.9},{:.16e}", p.iteration, p.block, p.seconds, p.objective).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Row-major CSV, every entry with 17 significant digits.
pub fn write_matrix_csv(m: &DMatrix<f64>, path: &Path) -> Result<()> {
    let mut out = create(path)?;
    let io = |e| FetrError::io(path, e);
    for row in m.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(",")).map_err(io)?;
    }
    out.flush().map_err(io)
}
