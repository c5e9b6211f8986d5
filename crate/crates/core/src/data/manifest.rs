//! JSON dataset manifests and plain numeric CSV matrices.
//!
//! A manifest either names one shared feature CSV (all tasks observe the
//! same instances) or one feature CSV per task:
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "d": 3,
//!   "header": false,
//!   "shared_features_csv_path": "x.csv",
//!   "shared_targets_csv_path": "y.csv",
//!   "tasks": [{ "name": "a" }, { "name": "b" }]
//! }
//! ```
//!
//! In shared mode the targets come either from `shared_targets_csv_path`
//! (`n x m`, one column per task) or from a `targets_csv_path` on every
//! task. In per-task mode every task carries both `features_csv_path` and
//! `targets_csv_path`. Relative paths resolve against the manifest's
//! directory.

use std::fs::File;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FetrError, Result};
use crate::types::{validate_dataset, MultitaskDataset};

pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskEntry {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features_csv_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets_csv_path: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub format_version: u32,
    /// Declared feature dimension, checked against the files when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d: Option<usize>,
    /// Whether every CSV starts with a header row.
    #[serde(default)]
    pub header: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_features_csv_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub shared_targets_csv_path: Option<PathBuf>,
    #[serde(default)]
    pub tasks: Vec<TaskEntry>,
}

impl DatasetManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| FetrError::io(path, e))?;
        let manifest: DatasetManifest = serde_json::from_reader(file).map_err(|e| FetrError::Manifest {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        manifest.check(path)?;
        Ok(manifest)
    }

    fn check(&self, path: &Path) -> Result<()> {
        let bad = |message: String| FetrError::Manifest {
            path: path.to_path_buf(),
            message,
        };
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(bad(format!(
                "unsupported format_version {} (expected {MANIFEST_FORMAT_VERSION})",
                self.format_version
            )));
        }
        let per_task_features = self.tasks.iter().filter(|t| t.features_csv_path.is_some()).count();
        match &self.shared_features_csv_path {
            Some(_) => {
                if per_task_features > 0 {
                    return Err(bad("shared_features_csv_path and per-task features_csv_path are mutually exclusive".into()));
                }
                let per_task_targets = self.tasks.iter().filter(|t| t.targets_csv_path.is_some()).count();
                match (&self.shared_targets_csv_path, per_task_targets) {
                    (Some(_), 0) => {}
                    (Some(_), _) => {
                        return Err(bad("give either shared_targets_csv_path or per-task targets, not both".into()))
                    }
                    (None, k) if k == self.tasks.len() && k > 0 => {}
                    (None, _) => {
                        return Err(bad("shared features need shared_targets_csv_path or a targets_csv_path on every task".into()))
                    }
                }
            }
            None => {
                if self.shared_targets_csv_path.is_some() {
                    return Err(bad("shared_targets_csv_path requires shared_features_csv_path".into()));
                }
                if self.tasks.is_empty() {
                    return Err(bad("no tasks listed".into()));
                }
                if let Some(t) = self
                    .tasks
                    .iter()
                    .find(|t| t.features_csv_path.is_none() || t.targets_csv_path.is_none())
                {
                    return Err(bad(format!(
                        "task '{}' needs both features_csv_path and targets_csv_path",
                        t.name
                    )));
                }
            }
        }
        Ok(())
    }

    /// Task names, generated as `task0, task1, ...` where the manifest has none.
    pub fn task_names(&self, num_tasks: usize) -> Vec<String> {
        (0..num_tasks)
            .map(|i| self.tasks.get(i).map_or_else(|| format!("task{i}"), |t| t.name.clone()))
            .collect()
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Reads a manifest and the CSVs it names into a validated dataset.
pub fn load_manifest(path: &Path) -> Result<MultitaskDataset> {
    load_manifest_with_names(path).map(|(data, _)| data)
}

/// As [`load_manifest`], also returning task names.
pub fn load_manifest_with_names(path: &Path) -> Result<(MultitaskDataset, Vec<String>)> {
    let manifest = DatasetManifest::read(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let header = manifest.header;
    let data = if let Some(xp) = &manifest.shared_features_csv_path {
        let xp = resolve(base, xp);
        let x = read_matrix_csv(&xp, header)?;
        let (y, ypath) = match &manifest.shared_targets_csv_path {
            Some(yp) => {
                let yp = resolve(base, yp);
                (read_matrix_csv(&yp, header)?, yp)
            }
            None => {
                let cols = manifest
                    .tasks
                    .iter()
                    .map(|t| read_vector_csv(&resolve(base, t.targets_csv_path.as_ref().expect("checked")), header))
                    .collect::<Result<Vec<_>>>()?;
                let n = cols[0].len();
                if let Some((i, c)) = cols.iter().enumerate().find(|(_, c)| c.len() != n) {
                    return Err(FetrError::Parse {
                        path: resolve(base, manifest.tasks[i].targets_csv_path.as_ref().expect("checked")),
                        line: c.len() as u64,
                        message: format!("has {} rows, the first task has {n}", c.len()),
                    });
                }
                (DMatrix::from_columns(&cols), xp.clone())
            }
        };
        if y.nrows() != x.nrows() {
            return Err(FetrError::Parse {
                path: ypath,
                line: y.nrows() as u64,
                message: format!("{} target rows but {} feature rows in {}", y.nrows(), x.nrows(), xp.display()),
            });
        }
        if !manifest.tasks.is_empty() && manifest.tasks.len() != y.ncols() {
            return Err(FetrError::Manifest {
                path: path.to_path_buf(),
                message: format!("{} tasks listed but targets have {} columns", manifest.tasks.len(), y.ncols()),
            });
        }
        MultitaskDataset::shared(x, &y)?
    } else {
        let mut raw = Vec::with_capacity(manifest.tasks.len());
        for t in &manifest.tasks {
            let xp = resolve(base, t.features_csv_path.as_ref().expect("checked"));
            let yp = resolve(base, t.targets_csv_path.as_ref().expect("checked"));
            let x = read_matrix_csv(&xp, header)?;
            let y = read_vector_csv(&yp, header)?;
            if y.len() != x.nrows() {
                return Err(FetrError::Parse {
                    path: yp,
                    line: y.len() as u64,
                    message: format!("{} targets but {} feature rows in {}", y.len(), x.nrows(), xp.display()),
                });
            }
            raw.push((x, y));
        }
        validate_dataset(raw)?
    };
    if let Some(d) = manifest.d {
        if d != data.dim() {
            return Err(FetrError::Manifest {
                path: path.to_path_buf(),
                message: format!("declares d = {d} but the features have {} columns", data.dim()),
            });
        }
    }
    let names = manifest.task_names(data.num_tasks());
    Ok((data, names))
}

/// Reads a rectangular numeric CSV (one row per line) into a matrix.
pub fn read_matrix_csv(path: &Path, header: bool) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| FetrError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(header)
        .trim(csv::Trim::All)
        .from_reader(file);
    let parse_err = |line: u64, message: String| FetrError::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut values = Vec::new();
    let mut rows = 0usize;
    let mut cols = None;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let width = *cols.get_or_insert(record.len());
        if record.len() != width {
            return Err(parse_err(line, format!("expected {width} fields, found {}", record.len())));
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .parse()
                .map_err(|_| parse_err(line, format!("field {} is not a number: '{cell}'", j + 1)))?;
            if !v.is_finite() {
                return Err(parse_err(line, format!("field {} is not finite: '{cell}'", j + 1)));
            }
            values.push(v);
        }
        rows += 1;
    }
    let cols = cols.unwrap_or(0);
    if rows == 0 || cols == 0 {
        return Err(parse_err(0, "no data rows".into()));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

/// Reads a single-column CSV.
pub fn read_vector_csv(path: &Path, header: bool) -> Result<DVector<f64>> {
    let m = read_matrix_csv(path, header)?;
    if m.ncols() != 1 {
        return Err(FetrError::Parse {
            path: path.to_path_buf(),
            line: 1,
            message: format!("expected one column of targets, found {}", m.ncols()),
        });
    }
    Ok(m.column(0).into_owned())
}
