//! Solvers for the weight subproblem
//! `h(W) = ||Y - XW||_F^2 + eta * tr(Sigma1 W Sigma2 W^T)` with both
//! precision matrices held fixed.

use nalgebra::DMatrix;

use crate::error::{FetrError, Result};
use crate::linalg::{self, sym_eig, sylvester_solve_spd};
use crate::types::{CovariancePair, MultitaskDataset, SpectrumBounds, WSolverKind, WeightMatrix};

/// Largest `m * d` for which `Auto` prefers the closed form.
pub const AUTO_CLOSED_FORM_MAX_DIM: usize = 256;

/// Fixed step size and linear-rate constants for gradient descent on `h`.
///
/// `lambda_l` and `lambda_u` bound the spectrum of the Hessian of `h / 2`,
/// i.e. of `I (x) X^T X + eta * Sigma2 (x) Sigma1`. `step` is the step for
/// that half-scaled gradient; [`grad_h`] returns the full gradient, so the
/// iteration uses `step / 2` on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepSchedule {
    pub lambda_l: f64,
    pub lambda_u: f64,
    pub step: f64,
    pub kappa: f64,
    pub gamma: f64,
}

impl StepSchedule {
    /// Schedule for any valid curvature bounds `0 < lambda_l <= lambda_u`,
    /// using the largest admissible step `2 / (lambda_u + lambda_l)`.
    pub fn from_curvature_bounds(lambda_l: f64, lambda_u: f64) -> Result<Self> {
        if !(lambda_l.is_finite() && lambda_u.is_finite() && lambda_l > 0.0 && lambda_u >= lambda_l)
        {
            return Err(FetrError::Domain(format!(
                "curvature bounds must satisfy 0 < l <= u, got [{lambda_l}, {lambda_u}]"
            )));
        }
        let sum = lambda_u + lambda_l;
        let ratio = (lambda_u - lambda_l) / sum;
        Ok(StepSchedule {
            lambda_l,
            lambda_u,
            step: 2.0 / sum,
            kappa: lambda_u / lambda_l,
            gamma: ratio * ratio,
        })
    }
}

/// Schedule from the extreme eigenvalues of `X^T X` and the spectrum box:
/// `lambda_l = min eig + eta l^2`, `lambda_u = max eig + eta u^2`.
pub fn step_schedule(xtx_eigs: &[f64], eta: f64, bounds: &SpectrumBounds) -> Result<StepSchedule> {
    if xtx_eigs.is_empty() {
        return Err(FetrError::EmptyData("no Gram eigenvalues".into()));
    }
    if !(eta > 0.0) {
        return Err(FetrError::InvalidConfig(format!("eta must be positive, got {eta}")));
    }
    let (lo, hi) = extremes(xtx_eigs);
    if lo < -1e-9 * hi.abs().max(1.0) {
        return Err(FetrError::Domain(format!("Gram eigenvalue {lo} is negative")));
    }
    let (l, u) = (bounds.lower(), bounds.upper());
    StepSchedule::from_curvature_bounds(lo.max(0.0) + eta * l * l, hi + eta * u * u)
}

/// Tighter schedule using the actual spectra of the current covariances
/// in place of the box `[l, u]`.
pub fn step_schedule_for(
    normal: &NormalEquations,
    eta: f64,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
) -> Result<StepSchedule> {
    let e1 = sym_eig(sigma1)?;
    let e2 = sym_eig(sigma2)?;
    if e1.min() <= 0.0 || e2.min() <= 0.0 {
        return Err(FetrError::Domain("covariances must be positive definite".into()));
    }
    let (lo, hi) = extremes(normal.gram_spectrum());
    StepSchedule::from_curvature_bounds(
        lo.max(0.0) + eta * e1.min() * e2.min(),
        hi + eta * e1.max() * e2.max(),
    )
}

fn extremes(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

enum Gram {
    Shared(DMatrix<f64>),
    PerTask(Vec<DMatrix<f64>>),
}

/// Cached `X^T X` and `X^T Y` for one dataset.
///
/// For per-task data the Gram matrices are kept per task and column `i` of
/// `xty` is `X_i^T y_i`.
pub struct NormalEquations {
    gram: Gram,
    xty: DMatrix<f64>,
    spectrum: Vec<f64>,
}

impl NormalEquations {
    pub fn new(data: &MultitaskDataset) -> Result<Self> {
        let d = data.dim();
        let m = data.num_tasks();
        let mut xty = DMatrix::zeros(d, m);
        for (i, t) in data.tasks().iter().enumerate() {
            xty.set_column(i, &(t.x().tr_mul(t.y())));
        }
        let (gram, spectrum) = if let Some(x) = data.shared_design() {
            let g = linalg::symmetrize(&x.tr_mul(x));
            let s = sym_eig(&g)?.values.as_slice().to_vec();
            (Gram::Shared(g), s)
        } else {
            let mut grams = Vec::with_capacity(m);
            let mut spectrum = Vec::with_capacity(m * d);
            for t in data.tasks() {
                let g = linalg::symmetrize(&t.x().tr_mul(t.x()));
                spectrum.extend_from_slice(sym_eig(&g)?.values.as_slice());
                grams.push(g);
            }
            (Gram::PerTask(grams), spectrum)
        };
        Ok(NormalEquations {
            gram,
            xty,
            spectrum,
        })
    }

    pub fn dim(&self) -> usize {
        self.xty.nrows()
    }

    pub fn num_tasks(&self) -> usize {
        self.xty.ncols()
    }

    pub fn xty(&self) -> &DMatrix<f64> {
        &self.xty
    }

    /// `X^T X` for shared-instance data.
    pub fn shared_gram(&self) -> Option<&DMatrix<f64>> {
        match &self.gram {
            Gram::Shared(g) => Some(g),
            Gram::PerTask(_) => None,
        }
    }

    /// Eigenvalues of every Gram matrix (of all tasks, for per-task data).
    pub fn gram_spectrum(&self) -> &[f64] {
        &self.spectrum
    }

    /// Writes `X^T X W` (columnwise `X_i^T X_i w_i` for per-task data) into `out`.
    fn gram_times(&self, w: &DMatrix<f64>, out: &mut DMatrix<f64>) {
        match &self.gram {
            Gram::Shared(g) => out.gemm(1.0, g, w, 0.0),
            Gram::PerTask(grams) => {
                for (i, g) in grams.iter().enumerate() {
                    let col = g * w.column(i);
                    out.set_column(i, &col);
                }
            }
        }
    }
}

fn check_shapes(normal: &NormalEquations, w: &DMatrix<f64>, s1: &DMatrix<f64>, s2: &DMatrix<f64>) -> Result<()> {
    let (d, m) = (normal.dim(), normal.num_tasks());
    if w.shape() != (d, m) || s1.shape() != (d, d) || s2.shape() != (m, m) {
        return Err(FetrError::Dimension(format!(
            "expected W {d}x{m}, Sigma1 {d}x{d}, Sigma2 {m}x{m}; got {:?}, {:?}, {:?}",
            w.shape(),
            s1.shape(),
            s2.shape()
        )));
    }
    Ok(())
}

/// `sum_i ||y_i - X_i w_i||^2`, computed from the residuals.
pub fn squared_loss(w: &DMatrix<f64>, data: &MultitaskDataset) -> Result<f64> {
    if w.shape() != (data.dim(), data.num_tasks()) {
        return Err(FetrError::Dimension(format!(
            "W is {:?}, expected {}x{}",
            w.shape(),
            data.dim(),
            data.num_tasks()
        )));
    }
    if let Some(x) = data.shared_design() {
        let pred = x * w;
        Ok(data
            .tasks()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.y() - pred.column(i)).norm_squared())
            .sum())
    } else {
        Ok(data
            .tasks()
            .iter()
            .enumerate()
            .map(|(i, t)| (t.y() - t.x() * w.column(i)).norm_squared())
            .sum())
    }
}

/// `h(W) = loss + eta * tr(Sigma1 W Sigma2 W^T)`.
pub fn h_objective(
    w: &DMatrix<f64>,
    data: &MultitaskDataset,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
) -> Result<f64> {
    Ok(squared_loss(w, data)? + eta * trace_form(w, sigma1, sigma2))
}

/// `tr(Sigma1 W Sigma2 W^T)`.
pub(crate) fn trace_form(w: &DMatrix<f64>, sigma1: &DMatrix<f64>, sigma2: &DMatrix<f64>) -> f64 {
    (sigma1 * w * sigma2).dot(w)
}

/// Gradient of `h`: `2 (X^T X W - X^T Y) + 2 eta Sigma1 W Sigma2`.
pub fn grad_h(
    w: &DMatrix<f64>,
    normal: &NormalEquations,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
) -> Result<DMatrix<f64>> {
    check_shapes(normal, w, sigma1, sigma2)?;
    let mut g = DMatrix::zeros(w.nrows(), w.ncols());
    let mut tmp = DMatrix::zeros(w.nrows(), w.ncols());
    gradient_into(w, normal, sigma1, sigma2, eta, &mut g, &mut tmp);
    Ok(g)
}

fn gradient_into(
    w: &DMatrix<f64>,
    normal: &NormalEquations,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
    g: &mut DMatrix<f64>,
    tmp: &mut DMatrix<f64>,
) {
    normal.gram_times(w, g);
    *g -= &normal.xty;
    tmp.gemm(1.0, sigma1, w, 0.0);
    g.gemm(eta, tmp, sigma2, 1.0);
    *g *= 2.0;
}

/// Exact minimiser via the `md x md` system
/// `(I_m (x) X^T X + eta Sigma2 (x) Sigma1) vec(W) = vec(X^T Y)`.
pub fn solve_w_closed(
    normal: &NormalEquations,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
    max_dim: usize,
) -> Result<WeightMatrix> {
    let gram = normal.shared_gram().ok_or_else(|| {
        FetrError::UnsupportedShape("the closed-form solver needs shared instances".into())
    })?;
    let (d, m) = (normal.dim(), normal.num_tasks());
    check_shapes(normal, normal.xty(), sigma1, sigma2)?;
    if d * m > max_dim {
        return Err(FetrError::Capacity(format!(
            "closed form needs an {0}x{0} system, limit is {max_dim}",
            d * m
        )));
    }
    let system = linalg::kron(&DMatrix::identity(m, m), gram) + linalg::kron(sigma2, sigma1) * eta;
    let rhs = linalg::vec(normal.xty());
    let sol = match system.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => system
            .lu()
            .solve(&rhs)
            .ok_or_else(|| FetrError::Singular("closed-form system".into()))?,
    };
    WeightMatrix::new(linalg::unvec(&sol, d, m))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GdOptions {
    pub max_iters: usize,
    pub rel_tol: f64,
}

#[derive(Debug, Clone)]
pub struct GdOutcome {
    pub weights: WeightMatrix,
    pub iterations: usize,
    pub converged: bool,
}

/// Fixed-step gradient descent from `w0`; stops once
/// `||grad||_F <= rel_tol (1 + ||X^T Y||_F)`.
pub fn solve_w_gd(
    normal: &NormalEquations,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
    schedule: &StepSchedule,
    w0: &DMatrix<f64>,
    opts: GdOptions,
) -> Result<GdOutcome> {
    solve_w_gd_observed(normal, sigma1, sigma2, eta, schedule, w0, opts, |_, _| {})
}

/// As [`solve_w_gd`], calling `observe(t, W_t)` after every step.
#[allow(clippy::too_many_arguments)]
pub fn solve_w_gd_observed<F>(
    normal: &NormalEquations,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
    schedule: &StepSchedule,
    w0: &DMatrix<f64>,
    opts: GdOptions,
    mut observe: F,
) -> Result<GdOutcome>
where
    F: FnMut(usize, &DMatrix<f64>),
{
    check_shapes(normal, w0, sigma1, sigma2)?;
    if !w0.iter().all(|v| v.is_finite()) {
        return Err(FetrError::Numeric("gradient descent start point".into()));
    }
    let tol = opts.rel_tol * (1.0 + normal.xty().norm());
    let half_step = 0.5 * schedule.step;
    let mut w = w0.clone();
    let mut g = DMatrix::zeros(w.nrows(), w.ncols());
    let mut tmp = DMatrix::zeros(w.nrows(), w.ncols());
    for it in 0..=opts.max_iters {
        gradient_into(&w, normal, sigma1, sigma2, eta, &mut g, &mut tmp);
        let gnorm = g.norm();
        if !gnorm.is_finite() {
            return Err(FetrError::Divergence(format!(
                "gradient became non-finite after {it} steps"
            )));
        }
        if gnorm <= tol || it == opts.max_iters {
            return Ok(GdOutcome {
                weights: WeightMatrix::new(w)?,
                iterations: it,
                converged: gnorm <= tol,
            });
        }
        w.zip_apply(&g, |wi, gi| *wi -= half_step * gi);
        observe(it + 1, &w);
    }
    unreachable!("loop returns at it == max_iters")
}

/// Solves the optimality condition `X^T X W + eta Sigma1 W Sigma2 = X^T Y`
/// through the symmetric Sylvester system in `W' = Sigma1^{1/2} W`:
/// `(S^{-1/2} X^T X S^{-1/2}) W' + W' (eta Sigma2) = S^{-1/2} X^T Y`.
pub fn solve_w_sylvester(
    normal: &NormalEquations,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    eta: f64,
) -> Result<WeightMatrix> {
    let gram = normal.shared_gram().ok_or_else(|| {
        FetrError::UnsupportedShape(
            "the Sylvester solver needs all tasks to share the same instances".into(),
        )
    })?;
    check_shapes(normal, normal.xty(), sigma1, sigma2)?;
    let e1 = sym_eig(sigma1)?;
    if e1.min() <= 0.0 {
        return Err(FetrError::Domain("Sigma1 must be positive definite".into()));
    }
    let inv_sqrt = e1.map_spectrum(|v| v.sqrt().recip());
    let a = linalg::symmetrize(&(&inv_sqrt * gram * &inv_sqrt));
    let c = &inv_sqrt * normal.xty();
    let w_prime = sylvester_solve_spd(&a, &(sigma2 * eta), &c)?;
    WeightMatrix::new(inv_sqrt * w_prime)
}

/// The solver `Auto` resolves to for a given problem shape.
pub fn resolve_solver(kind: WSolverKind, shared: bool, md: usize) -> WSolverKind {
    match kind {
        WSolverKind::Auto if !shared => WSolverKind::GradientDescent,
        WSolverKind::Auto if md <= AUTO_CLOSED_FORM_MAX_DIM => WSolverKind::ClosedForm,
        WSolverKind::Auto => WSolverKind::Sylvester,
        other => other,
    }
}

/// Outcome of one weight-block solve.
#[derive(Debug, Clone)]
pub struct WSolve {
    pub weights: WeightMatrix,
    pub solver: WSolverKind,
    /// Gradient steps taken (zero for the direct solvers).
    pub gd_iterations: usize,
    pub gd_converged: bool,
}

/// Dispatches to the configured solver. Gradient descent starts from
/// `warm_start` and uses the schedule of the current covariances.
pub fn solve_w(
    kind: WSolverKind,
    normal: &NormalEquations,
    covs: &CovariancePair,
    eta: f64,
    warm_start: &DMatrix<f64>,
    closed_form_max_dim: usize,
    gd: GdOptions,
) -> Result<WSolve> {
    let shared = normal.shared_gram().is_some();
    let solver = resolve_solver(kind, shared, normal.dim() * normal.num_tasks());
    let (s1, s2) = (covs.sigma1(), covs.sigma2());
    let direct = |weights| WSolve {
        weights,
        solver,
        gd_iterations: 0,
        gd_converged: true,
    };
    match solver {
        WSolverKind::ClosedForm => {
            solve_w_closed(normal, s1, s2, eta, closed_form_max_dim).map(direct)
        }
        WSolverKind::Sylvester => solve_w_sylvester(normal, s1, s2, eta).map(direct),
        WSolverKind::GradientDescent | WSolverKind::Auto => {
            let schedule = step_schedule_for(normal, eta, s1, s2)?;
            let out = solve_w_gd(normal, s1, s2, eta, &schedule, warm_start, gd)?;
            Ok(WSolve {
                weights: out.weights,
                solver: WSolverKind::GradientDescent,
                gd_iterations: out.iterations,
                gd_converged: out.converged,
            })
        }
    }
}
