//! Domain types shared across the solvers.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{FetrError, Result};

/// Relative tolerance used when checking that an input matrix is symmetric.
pub const SYMMETRY_TOL: f64 = 1e-12;
/// Slack allowed on the spectrum bounds of a covariance pair.
pub const SPECTRUM_TOL: f64 = 1e-9;

/// One regression task: a design matrix and its targets.
///
/// The design matrix sits behind an `Arc` so that shared-instance datasets
/// hold a single copy of `X` for all tasks.
#[derive(Debug, Clone)]
pub struct Task {
    x: Arc<DMatrix<f64>>,
    y: DVector<f64>,
}

impl Task {
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }
}

/// Per-task design matrices and targets.
///
/// `shared` is true iff every task observes the same design matrix, in which
/// case the targets can be viewed as one `n x m` matrix.
#[derive(Debug, Clone)]
pub struct MultitaskDataset {
    tasks: Vec<Task>,
    d: usize,
    shared: bool,
}

fn bitwise_eq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> bool {
    a.shape() == b.shape()
        && a
            .iter()
            .zip(b.iter())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Validates a raw task list and detects whether the instances are shared.
pub fn validate_dataset(raw: Vec<(DMatrix<f64>, DVector<f64>)>) -> Result<MultitaskDataset> {
    if raw.is_empty() {
        return Err(FetrError::EmptyData("no tasks provided".into()));
    }
    let d = raw[0].0.ncols();
    if d == 0 {
        return Err(FetrError::EmptyData("feature dimension is zero".into()));
    }
    for (i, (x, y)) in raw.iter().enumerate() {
        if x.ncols() != d {
            return Err(FetrError::Dimension(format!(
                "task {i} has {} features, expected {d}",
                x.ncols()
            )));
        }
        if x.nrows() == 0 {
            return Err(FetrError::EmptyData(format!("task {i} has no instances")));
        }
        if y.len() != x.nrows() {
            return Err(FetrError::Dimension(format!(
                "task {i} has {} rows but {} targets",
                x.nrows(),
                y.len()
            )));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(FetrError::Numeric(format!("task {i} data")));
        }
    }

    let shared = raw.iter().skip(1).all(|(x, _)| bitwise_eq(x, &raw[0].0));
    let mut tasks = Vec::with_capacity(raw.len());
    if shared {
        let mut iter = raw.into_iter();
        let (x0, y0) = iter.next().expect("non-empty");
        let x = Arc::new(x0);
        tasks.push(Task {
            x: Arc::clone(&x),
            y: y0,
        });
        for (_, y) in iter {
            tasks.push(Task {
                x: Arc::clone(&x),
                y,
            });
        }
    } else {
        tasks.extend(raw.into_iter().map(|(x, y)| Task { x: Arc::new(x), y }));
    }
    Ok(MultitaskDataset { tasks, d, shared })
}

impl MultitaskDataset {
    /// Builds a shared-instance dataset from `X: n x d` and `Y: n x m`.
    pub fn shared(x: DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        if y.ncols() == 0 {
            return Err(FetrError::EmptyData("no tasks provided".into()));
        }
        if x.ncols() == 0 {
            return Err(FetrError::EmptyData("feature dimension is zero".into()));
        }
        if x.nrows() == 0 {
            return Err(FetrError::EmptyData("no instances".into()));
        }
        if x.nrows() != y.nrows() {
            return Err(FetrError::Dimension(format!(
                "X has {} rows, Y has {}",
                x.nrows(),
                y.nrows()
            )));
        }
        if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
            return Err(FetrError::Numeric("shared design or targets".into()));
        }
        let d = x.ncols();
        let x = Arc::new(x);
        let tasks = y
            .column_iter()
            .map(|c| Task {
                x: Arc::clone(&x),
                y: c.into_owned(),
            })
            .collect();
        Ok(MultitaskDataset {
            tasks,
            d,
            shared: true,
        })
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn task(&self, i: usize) -> &Task {
        &self.tasks[i]
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_shared(&self) -> bool {
        self.shared
    }

    pub fn task_sizes(&self) -> Vec<usize> {
        self.tasks.iter().map(Task::len).collect()
    }

    /// The common design matrix, if the instances are shared.
    pub fn shared_design(&self) -> Option<&DMatrix<f64>> {
        self.shared.then(|| self.tasks[0].x())
    }

    /// Targets as an `n x m` matrix, if the instances are shared.
    pub fn target_matrix(&self) -> Option<DMatrix<f64>> {
        if !self.shared {
            return None;
        }
        let cols: Vec<_> = self.tasks.iter().map(|t| t.y.clone()).collect();
        Some(DMatrix::from_columns(&cols))
    }

    /// Copies the dataset back into the raw task-list form.
    pub fn to_raw(&self) -> Vec<(DMatrix<f64>, DVector<f64>)> {
        self.tasks
            .iter()
            .map(|t| ((*t.x).clone(), t.y.clone()))
            .collect()
    }

    /// Returns a dataset restricted to the given rows of each task.
    pub(crate) fn select_rows(&self, rows: &[Vec<usize>]) -> Result<MultitaskDataset> {
        if self.shared {
            // Shared datasets use one row selection for every task.
            let idx = &rows[0];
            let x = self.tasks[0].x.select_rows(idx.iter());
            let y = self.target_matrix().expect("shared").select_rows(idx.iter());
            return MultitaskDataset::shared(x, &y);
        }
        validate_dataset(
            self.tasks
                .iter()
                .zip(rows)
                .map(|(t, idx)| (t.x.select_rows(idx.iter()), t.y.select_rows(idx.iter())))
                .collect(),
        )
    }

    /// Replaces every design matrix by `f(X)`, keeping shared matrices shared.
    pub(crate) fn map_features<F>(&self, mut f: F) -> Result<MultitaskDataset>
    where
        F: FnMut(&DMatrix<f64>) -> DMatrix<f64>,
    {
        if self.shared {
            let x = f(self.tasks[0].x());
            let y = self.target_matrix().expect("shared");
            MultitaskDataset::shared(x, &y)
        } else {
            validate_dataset(
                self.tasks
                    .iter()
                    .map(|t| (f(t.x()), t.y.clone()))
                    .collect(),
            )
        }
    }
}

impl PartialEq for MultitaskDataset {
    fn eq(&self, other: &Self) -> bool {
        self.d == other.d
            && self.shared == other.shared
            && self.tasks.len() == other.tasks.len()
            && self
                .tasks
                .iter()
                .zip(&other.tasks)
                .all(|(a, b)| a.x == b.x && a.y == b.y)
    }
}

/// The `d x m` parameter matrix; column `i` is the weight vector of task `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix(DMatrix<f64>);

impl WeightMatrix {
    pub fn new(w: DMatrix<f64>) -> Result<Self> {
        if !w.iter().all(|v| v.is_finite()) {
            return Err(FetrError::Numeric("weight matrix".into()));
        }
        Ok(WeightMatrix(w))
    }

    pub fn zeros(d: usize, m: usize) -> Self {
        WeightMatrix(DMatrix::zeros(d, m))
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }
}

impl AsRef<DMatrix<f64>> for WeightMatrix {
    fn as_ref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// The spectrum box `[l, u]` with `0 < l < u`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpectrumBounds {
    l: f64,
    u: f64,
}

impl SpectrumBounds {
    pub fn new(l: f64, u: f64) -> Result<Self> {
        if !(l.is_finite() && u.is_finite() && l > 0.0 && u > l) {
            return Err(FetrError::InvalidConfig(format!(
                "spectrum bounds must satisfy 0 < l < u, got l={l}, u={u}"
            )));
        }
        Ok(SpectrumBounds { l, u })
    }

    pub fn lower(&self) -> f64 {
        self.l
    }

    pub fn upper(&self) -> f64 {
        self.u
    }

    /// Clamps `x` into `[l, u]`; `+inf` maps to `u`.
    pub fn clamp(&self, x: f64) -> f64 {
        crate::linalg::hard_threshold(x, self.l, self.u)
    }

    pub fn admits(&self, eigenvalue: f64) -> bool {
        eigenvalue >= self.l - SPECTRUM_TOL && eigenvalue <= self.u + SPECTRUM_TOL
    }
}

/// Feature and task precision matrices with their spectrum box.
#[derive(Debug, Clone, PartialEq)]
pub struct CovariancePair {
    sigma1: DMatrix<f64>,
    sigma2: DMatrix<f64>,
    bounds: SpectrumBounds,
}

pub(crate) fn check_symmetric(s: &DMatrix<f64>, what: &str) -> Result<()> {
    if !s.is_square() {
        return Err(FetrError::Dimension(format!(
            "{what} is {}x{}, expected square",
            s.nrows(),
            s.ncols()
        )));
    }
    if !s.iter().all(|v| v.is_finite()) {
        return Err(FetrError::Numeric(what.to_string()));
    }
    let asym = (s - s.transpose()).norm();
    if asym > SYMMETRY_TOL * s.norm().max(1.0) {
        return Err(FetrError::Domain(format!(
            "{what} is not symmetric (asymmetry {asym:.3e})"
        )));
    }
    Ok(())
}

impl CovariancePair {
    pub fn new(sigma1: DMatrix<f64>, sigma2: DMatrix<f64>, bounds: SpectrumBounds) -> Result<Self> {
        let sigma1 = Self::checked(sigma1, "sigma1", &bounds)?;
        let sigma2 = Self::checked(sigma2, "sigma2", &bounds)?;
        Ok(CovariancePair {
            sigma1,
            sigma2,
            bounds,
        })
    }

    fn checked(s: DMatrix<f64>, what: &str, bounds: &SpectrumBounds) -> Result<DMatrix<f64>> {
        check_symmetric(&s, what)?;
        let s = crate::linalg::symmetrize(&s);
        let eig = crate::linalg::sym_eig(&s)?;
        if let Some(bad) = eig.values.iter().find(|&&v| !bounds.admits(v)) {
            return Err(FetrError::Domain(format!(
                "{what} has eigenvalue {bad} outside [{}, {}]",
                bounds.lower(),
                bounds.upper()
            )));
        }
        Ok(s)
    }

    /// `c I_d` and `c I_m` with `c = clamp(1)`.
    pub fn initial(d: usize, m: usize, bounds: SpectrumBounds) -> Self {
        let c = bounds.clamp(1.0);
        CovariancePair {
            sigma1: DMatrix::identity(d, d) * c,
            sigma2: DMatrix::identity(m, m) * c,
            bounds,
        }
    }

    pub fn sigma1(&self) -> &DMatrix<f64> {
        &self.sigma1
    }

    pub fn sigma2(&self) -> &DMatrix<f64> {
        &self.sigma2
    }

    pub fn bounds(&self) -> SpectrumBounds {
        self.bounds
    }

    pub fn into_parts(self) -> (DMatrix<f64>, DMatrix<f64>) {
        (self.sigma1, self.sigma2)
    }
}

/// Which algorithm solves the weight subproblem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WSolverKind {
    #[serde(rename = "closed")]
    ClosedForm,
    #[serde(rename = "gd")]
    GradientDescent,
    Sylvester,
    #[default]
    Auto,
}

impl FromStr for WSolverKind {
    type Err = FetrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "closed" => Ok(WSolverKind::ClosedForm),
            "gd" => Ok(WSolverKind::GradientDescent),
            "sylvester" => Ok(WSolverKind::Sylvester),
            "auto" => Ok(WSolverKind::Auto),
            other => Err(FetrError::InvalidConfig(format!(
                "unknown W solver '{other}' (expected auto|closed|gd|sylvester)"
            ))),
        }
    }
}

impl fmt::Display for WSolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WSolverKind::ClosedForm => "closed",
            WSolverKind::GradientDescent => "gd",
            WSolverKind::Sylvester => "sylvester",
            WSolverKind::Auto => "auto",
        })
    }
}

/// Hyperparameters and stopping rules for a fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FetrConfig {
    pub eta: f64,
    pub l: f64,
    pub u: f64,
    pub w_solver: WSolverKind,
    pub max_outer_iters: usize,
    pub rel_obj_tol: f64,
    pub gd_max_iters: usize,
    pub gd_rel_tol: f64,
    pub seed: u64,
    /// Largest `m * d` for which the Kronecker system is assembled.
    pub closed_form_max_dim: usize,
    /// Wall-clock limit for a whole fit, if any.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub time_budget_secs: Option<f64>,
}

impl Default for FetrConfig {
    fn default() -> Self {
        FetrConfig {
            eta: 1.0,
            l: 1e-3,
            u: 1e3,
            w_solver: WSolverKind::Auto,
            max_outer_iters: 100,
            rel_obj_tol: 1e-8,
            gd_max_iters: 200_000,
            gd_rel_tol: 1e-10,
            seed: 0,
            closed_form_max_dim: 4000,
            time_budget_secs: None,
        }
    }
}

impl FetrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta.is_finite() && self.eta > 0.0) {
            return Err(FetrError::InvalidConfig(format!(
                "eta must be positive, got {}",
                self.eta
            )));
        }
        SpectrumBounds::new(self.l, self.u)?;
        for (name, v) in [("rel_obj_tol", self.rel_obj_tol), ("gd_rel_tol", self.gd_rel_tol)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(FetrError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if let Some(b) = self.time_budget_secs {
            if !(b > 0.0) {
                return Err(FetrError::InvalidConfig(format!(
                    "time budget must be positive, got {b}"
                )));
            }
        }
        Ok(())
    }

    pub fn bounds(&self) -> Result<SpectrumBounds> {
        SpectrumBounds::new(self.l, self.u)
    }
}

/// Symmetric eigendecomposition `S = V diag(values) V^T`, values ascending.
#[derive(Debug, Clone)]
pub struct EigenDecomp {
    pub vectors: DMatrix<f64>,
    pub values: DVector<f64>,
}

impl EigenDecomp {
    /// `V diag(f(values)) V^T`.
    pub fn map_spectrum<F: Fn(f64) -> f64>(&self, f: F) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= f(self.values[j]);
        }
        let out = scaled * self.vectors.transpose();
        crate::linalg::symmetrize(&out)
    }

    pub fn reconstruct(&self) -> DMatrix<f64> {
        self.map_spectrum(|v| v)
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// The block a trace point was recorded after.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Block {
    Init,
    W,
    Sigma1,
    Sigma2,
    /// A simultaneous update of all variables (projected gradient).
    Joint,
    /// A simultaneous update of both covariances (flip-flop).
    Covariances,
}

impl fmt::Display for Block {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Block::Init => "init",
            Block::W => "w",
            Block::Sigma1 => "sigma1",
            Block::Sigma2 => "sigma2",
            Block::Joint => "joint",
            Block::Covariances => "covariances",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub block: Block,
    pub seconds: f64,
    pub objective: f64,
    /// Objective evaluations performed up to and including this point.
    pub evaluations: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockSeconds {
    pub w: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

/// What happened during a fit.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub objective_trace: Vec<TracePoint>,
    pub converged: bool,
    pub iterations: usize,
    pub per_block_seconds: BlockSeconds,
    pub objective_evaluations: usize,
    /// Notable events, e.g. a covariance update that lost rank.
    pub events: Vec<String>,
}

impl TrainReport {
    pub fn final_objective(&self) -> Option<f64> {
        self.objective_trace.last().map(|p| p.objective)
    }

    pub(crate) fn push(&mut self, iteration: usize, block: Block, seconds: f64, objective: f64) {
        let seconds = self
            .objective_trace
            .last()
            .map_or(seconds, |p| seconds.max(p.seconds));
        self.objective_trace.push(TracePoint {
            iteration,
            block,
            seconds,
            objective,
            evaluations: self.objective_evaluations,
        });
    }
}
