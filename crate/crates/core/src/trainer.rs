//! Objective evaluation, the outer block coordinate loop, prediction and
//! regression metrics.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::cov::{minimize_sigma1, minimize_sigma2};
use crate::error::{FetrError, Result};
use crate::linalg::sym_eig;
use crate::types::{Block, CovariancePair, FetrConfig, MultitaskDataset, TrainReport, WeightMatrix};
use crate::wsolve::{self, GdOptions, NormalEquations};

/// A fitted model. Immutable once returned.
#[derive(Debug, Clone)]
pub struct FetrModel {
    pub weights: WeightMatrix,
    pub covariances: CovariancePair,
    pub config: FetrConfig,
    pub report: TrainReport,
}

impl FetrModel {
    pub fn predict(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        predict(self.weights.as_matrix(), x)
    }
}

fn log_det_checked(s: &DMatrix<f64>, what: &str) -> Result<f64> {
    let e = sym_eig(s)?;
    if e.min() <= 0.0 {
        return Err(FetrError::Domain(format!(
            "{what} is not positive definite (smallest eigenvalue {:e})",
            e.min()
        )));
    }
    Ok(e.values.iter().map(|v| v.ln()).sum())
}

/// The unconstrained objective
/// `loss + eta tr(Sigma1 W Sigma2 W^T) - eta (m log|Sigma1| + d log|Sigma2|)`
/// for any positive definite pair. Without the spectrum box this is
/// unbounded below (take `W = 0`, `Sigma = s I`, `s -> inf`).
pub fn mtfrl_objective_unconstrained(
    w: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    data: &MultitaskDataset,
    eta: f64,
) -> Result<f64> {
    let (d, m) = (data.dim(), data.num_tasks());
    if sigma1.shape() != (d, d) || sigma2.shape() != (m, m) {
        return Err(FetrError::Dimension(format!(
            "expected Sigma1 {d}x{d} and Sigma2 {m}x{m}, got {:?} and {:?}",
            sigma1.shape(),
            sigma2.shape()
        )));
    }
    let ld1 = log_det_checked(sigma1, "Sigma1")?;
    let ld2 = log_det_checked(sigma2, "Sigma2")?;
    let h = wsolve::h_objective(w, data, sigma1, sigma2, eta)?;
    let value = h - eta * (m as f64 * ld1 + d as f64 * ld2);
    if !value.is_finite() {
        return Err(FetrError::Numeric(format!("objective evaluated to {value}")));
    }
    Ok(value)
}

/// The bounded objective at a feasible point. Feasibility is carried by
/// [`CovariancePair`], whose constructor enforces the spectrum box.
pub fn fetr_objective(
    w: &DMatrix<f64>,
    covariances: &CovariancePair,
    data: &MultitaskDataset,
    eta: f64,
) -> Result<f64> {
    mtfrl_objective_unconstrained(w, covariances.sigma1(), covariances.sigma2(), data, eta)
}

/// `X W`, one column per task.
pub fn predict(w: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != w.nrows() {
        return Err(FetrError::Dimension(format!(
            "X has {} columns but W has {} rows",
            x.ncols(),
            w.nrows()
        )));
    }
    Ok(x * w)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MetricKind {
    Mse,
    Nmse,
}

impl std::str::FromStr for MetricKind {
    type Err = FetrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mse" => Ok(MetricKind::Mse),
            "nmse" => Ok(MetricKind::Nmse),
            other => Err(FetrError::InvalidConfig(format!(
                "unknown metric '{other}' (expected mse|nmse)"
            ))),
        }
    }
}

impl std::fmt::Display for MetricKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MetricKind::Mse => "mse",
            MetricKind::Nmse => "nmse",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub kind: MetricKind,
    pub per_task: Vec<f64>,
    /// Mean over tasks.
    pub aggregate: f64,
}

/// Per-task MSE or NMSE (MSE over the population variance of the targets).
pub fn metrics(y_true: &[DVector<f64>], y_pred: &[DVector<f64>], kind: MetricKind) -> Result<Metrics> {
    if y_true.len() != y_pred.len() || y_true.is_empty() {
        return Err(FetrError::Dimension(format!(
            "{} target tasks vs {} prediction tasks",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut per_task = Vec::with_capacity(y_true.len());
    for (i, (t, p)) in y_true.iter().zip(y_pred).enumerate() {
        if t.len() != p.len() || t.is_empty() {
            return Err(FetrError::Dimension(format!(
                "task {i}: {} targets vs {} predictions",
                t.len(),
                p.len()
            )));
        }
        let n = t.len() as f64;
        let mse = (t - p).norm_squared() / n;
        per_task.push(match kind {
            MetricKind::Mse => mse,
            MetricKind::Nmse => {
                let var = t.add_scalar(-t.mean()).norm_squared() / n;
                if var == 0.0 {
                    return Err(FetrError::DegenerateMetric(format!(
                        "task {i} has constant targets; NMSE is undefined"
                    )));
                }
                mse / var
            }
        });
    }
    let aggregate = per_task.iter().sum::<f64>() / per_task.len() as f64;
    Ok(Metrics {
        kind,
        per_task,
        aggregate,
    })
}

/// Scores `w` on every task of `data`.
pub fn evaluate(w: &DMatrix<f64>, data: &MultitaskDataset, kind: MetricKind) -> Result<Metrics> {
    if w.shape() != (data.dim(), data.num_tasks()) {
        return Err(FetrError::Dimension(format!(
            "W is {:?}, data is {}x{}",
            w.shape(),
            data.dim(),
            data.num_tasks()
        )));
    }
    let truth: Vec<DVector<f64>> = data.tasks().iter().map(|t| t.y().clone()).collect();
    let preds: Vec<DVector<f64>> = data
        .tasks()
        .iter()
        .enumerate()
        .map(|(i, t)| t.x() * w.column(i))
        .collect();
    metrics(&truth, &preds, kind)
}

/// Objective plus bookkeeping shared by the trainer and the baselines.
pub(crate) struct Recorder<'a> {
    pub data: &'a MultitaskDataset,
    pub eta: f64,
    pub start: Instant,
    pub budget: Option<f64>,
    pub report: TrainReport,
}

impl<'a> Recorder<'a> {
    pub fn new(data: &'a MultitaskDataset, eta: f64, budget: Option<f64>) -> Self {
        Recorder {
            data,
            eta,
            start: Instant::now(),
            budget,
            report: TrainReport::default(),
        }
    }

    pub fn elapsed(&self) -> f64 {
        self.start.elapsed().as_secs_f64()
    }

    pub fn out_of_time(&self) -> bool {
        self.budget.is_some_and(|b| self.elapsed() >= b)
    }

    pub fn objective(&mut self, w: &DMatrix<f64>, covs: &CovariancePair) -> Result<f64> {
        self.report.objective_evaluations += 1;
        fetr_objective(w, covs, self.data, self.eta)
    }

    pub fn record(&mut self, iteration: usize, block: Block, objective: f64) {
        let t = self.elapsed();
        self.report.push(iteration, block, t, objective);
    }
}

/// Minimises the bounded objective by exact block coordinate descent:
/// `W`, then `Sigma1`, then `Sigma2`, recording the objective after each.
pub fn fit_fetr(data: &MultitaskDataset, config: &FetrConfig) -> Result<FetrModel> {
    config.validate()?;
    let bounds = config.bounds()?;
    let (d, m) = (data.dim(), data.num_tasks());
    let normal = NormalEquations::new(data)?;
    let gd = GdOptions {
        max_iters: config.gd_max_iters,
        rel_tol: config.gd_rel_tol,
    };

    let mut rec = Recorder::new(data, config.eta, config.time_budget_secs);
    let mut w = DMatrix::zeros(d, m);
    let mut covs = CovariancePair::initial(d, m, bounds);
    let mut prev = rec.objective(&w, &covs)?;
    rec.record(0, Block::Init, prev);

    let check = |rec: &Recorder, before: f64, after: f64, what: Block, it: usize| -> Result<()> {
        if after > before + 1e-10 * (1.0 + before.abs()) {
            return Err(FetrError::Internal(format!(
                "objective increased in the {what} block of iteration {it}: {before:.17e} -> {after:.17e} (trace length {})",
                rec.report.objective_trace.len()
            )));
        }
        Ok(())
    };

    for it in 1..=config.max_outer_iters {
        if rec.out_of_time() {
            rec.report.events.push(format!("time budget exhausted before iteration {it}"));
            break;
        }
        rec.report.iterations = it;

        let t0 = Instant::now();
        let solved = wsolve::solve_w(
            config.w_solver,
            &normal,
            &covs,
            config.eta,
            &w,
            config.closed_form_max_dim,
            gd,
        )?;
        if !solved.gd_converged {
            rec.report.events.push(format!(
                "iteration {it}: gradient descent stopped at {} steps before reaching tolerance",
                solved.gd_iterations
            ));
        }
        w = solved.weights.into_inner();
        rec.report.per_block_seconds.w += t0.elapsed().as_secs_f64();
        let f_w = rec.objective(&w, &covs)?;
        rec.record(it, Block::W, f_w);
        check(&rec, prev, f_w, Block::W, it)?;

        let t0 = Instant::now();
        let s1 = minimize_sigma1(&w, covs.sigma2(), &bounds)?;
        covs = CovariancePair::new(s1, covs.sigma2().clone(), bounds)?;
        rec.report.per_block_seconds.sigma1 += t0.elapsed().as_secs_f64();
        let f_1 = rec.objective(&w, &covs)?;
        rec.record(it, Block::Sigma1, f_1);
        check(&rec, f_w, f_1, Block::Sigma1, it)?;

        let t0 = Instant::now();
        let s2 = minimize_sigma2(&w, covs.sigma1(), &bounds)?;
        covs = CovariancePair::new(covs.sigma1().clone(), s2, bounds)?;
        rec.report.per_block_seconds.sigma2 += t0.elapsed().as_secs_f64();
        let f_2 = rec.objective(&w, &covs)?;
        rec.record(it, Block::Sigma2, f_2);
        check(&rec, f_1, f_2, Block::Sigma2, it)?;

        let done = (prev - f_2).abs() <= config.rel_obj_tol * (1.0 + prev.abs());
        prev = f_2;
        if done {
            rec.report.converged = true;
            break;
        }
    }

    Ok(FetrModel {
        weights: WeightMatrix::new(w)?,
        covariances: covs,
        config: config.clone(),
        report: rec.report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, random_feasible_covariance};
    use crate::types::{validate_dataset, SpectrumBounds, WSolverKind};
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn zero_data(n: usize, d: usize, m: usize) -> MultitaskDataset {
        let x = DMatrix::from_fn(n, d, |i, j| ((i + 2 * j) % 5) as f64 + 0.5 * j as f64);
        MultitaskDataset::shared(x, &DMatrix::zeros(n, m)).unwrap()
    }

    #[test]
    fn objective_examples() {
        let data = zero_data(6, 2, 3);
        let w = DMatrix::zeros(2, 3);
        let id = |k| DMatrix::<f64>::identity(k, k);
        assert_relative_eq!(mtfrl_objective_unconstrained(&w, &id(2), &id(3), &data, 1.0).unwrap(), 0.0);
        let e = std::f64::consts::E;
        let v = mtfrl_objective_unconstrained(&w, &(id(2) * e), &(id(3) * e), &data, 1.0).unwrap();
        assert_relative_eq!(v, -12.0, epsilon = 1e-12);
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        assert!(matches!(
            mtfrl_objective_unconstrained(&w, &bad, &id(3), &data, 1.0),
            Err(FetrError::Domain(_))
        ));
    }

    #[test]
    fn trace_form_matches_square_root_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let b = SpectrumBounds::new(0.01, 100.0).unwrap();
        for _ in 0..20 {
            let (d, m) = (rng.random_range(1..6), rng.random_range(1..6));
            let data = generate_synthetic(15, d, m, rng.random()).unwrap();
            let w = DMatrix::from_fn(d, m, |_, _| rng.random_range(-2.0..2.0));
            let s1 = random_feasible_covariance(d, &b, &mut rng);
            let s2 = random_feasible_covariance(m, &b, &mut rng);
            let eta = 0.7;
            let v = mtfrl_objective_unconstrained(&w, &s1, &s2, &data, eta).unwrap();
            let r1 = sym_eig(&s1).unwrap().map_spectrum(f64::sqrt);
            let r2 = sym_eig(&s2).unwrap().map_spectrum(f64::sqrt);
            let reg = (&r1 * &w * &r2).norm_squared();
            let ld = |s: &DMatrix<f64>| sym_eig(s).unwrap().values.iter().map(|x| x.ln()).sum::<f64>();
            let alt = wsolve::squared_loss(&w, &data).unwrap() + eta * reg
                - eta * (m as f64 * ld(&s1) + d as f64 * ld(&s2));
            assert!((v - alt).abs() <= 1e-9 * (1.0 + v.abs()));
        }
    }

    #[test]
    fn unconstrained_objective_is_unbounded() {
        let data = zero_data(4, 2, 3);
        let w = DMatrix::zeros(2, 3);
        let vals: Vec<f64> = (0..=8)
            .map(|k| {
                let s = 10f64.powi(k);
                mtfrl_objective_unconstrained(&w, &(DMatrix::identity(2, 2) * s), &(DMatrix::identity(3, 3) * s), &data, 1.0)
                    .unwrap()
            })
            .collect();
        assert!(vals.windows(2).all(|p| p[1] < p[0]));
        assert!(vals[8] < -100.0);
    }

    #[test]
    fn predict_examples() {
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(predict(&w, &DMatrix::identity(2, 2)).unwrap(), w);
        assert_eq!(predict(&DMatrix::zeros(2, 3), &DMatrix::from_element(4, 2, 1.5)).unwrap(), DMatrix::zeros(4, 3));
        let x = DMatrix::from_row_slice(1, 3, &[1.0, -1.0, 2.0]);
        let w = DMatrix::from_column_slice(3, 1, &[0.5, 1.0, 2.0]);
        assert_relative_eq!(predict(&w, &x).unwrap()[(0, 0)], 3.5);
        assert!(predict(&w, &DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn metric_examples() {
        let t = vec![DVector::from_vec(vec![0.0, 2.0])];
        let m = metrics(&t, &[DVector::zeros(2)], MetricKind::Mse).unwrap();
        assert_relative_eq!(m.aggregate, 2.0);
        let m = metrics(&t, &[DVector::zeros(2)], MetricKind::Nmse).unwrap();
        assert_relative_eq!(m.aggregate, 2.0);
        let m = metrics(&t, &[DVector::from_element(2, 1.0)], MetricKind::Nmse).unwrap();
        assert_relative_eq!(m.aggregate, 1.0);
        let m = metrics(&t, &t, MetricKind::Nmse).unwrap();
        assert_eq!(m.aggregate, 0.0);
        let c = vec![DVector::from_element(3, 4.0)];
        assert!(matches!(
            metrics(&c, &c, MetricKind::Nmse),
            Err(FetrError::DegenerateMetric(_))
        ));
        assert!(metrics(&c, &[DVector::zeros(2)], MetricKind::Mse).is_err());
    }

    #[test]
    fn zero_targets_converge_to_trivial_solution() {
        let data = zero_data(10, 3, 2);
        let cfg = FetrConfig::default();
        let model = fit_fetr(&data, &cfg).unwrap();
        assert!(model.report.converged);
        assert_eq!(model.weights.as_matrix().norm(), 0.0);
        assert!((model.covariances.sigma1() - DMatrix::identity(3, 3) * cfg.u).norm() < 1e-9);
        assert!((model.covariances.sigma2() - DMatrix::identity(2, 2) * cfg.u).norm() < 1e-9);
    }

    #[test]
    fn trace_has_three_points_per_iteration_and_descends() {
        let data = generate_synthetic(300, 6, 4, 5).unwrap();
        let cfg = FetrConfig {
            l: 0.01,
            u: 100.0,
            ..FetrConfig::default()
        };
        let model = fit_fetr(&data, &cfg).unwrap();
        let tr = &model.report.objective_trace;
        assert_eq!(tr.len(), 3 * model.report.iterations + 1);
        assert!(tr.windows(2).all(|p| p[1].objective <= p[0].objective + 1e-10 * (1.0 + p[0].objective.abs())));
        assert!(tr.windows(2).all(|p| p[1].seconds >= p[0].seconds));
        assert_eq!(model.report.objective_evaluations, tr.len());
    }

    #[test]
    fn deterministic_trace() {
        let data = generate_synthetic(200, 5, 3, 9).unwrap();
        let cfg = FetrConfig::default();
        let a = fit_fetr(&data, &cfg).unwrap();
        let b = fit_fetr(&data, &cfg).unwrap();
        let objs = |m: &FetrModel| m.report.objective_trace.iter().map(|p| p.objective.to_bits()).collect::<Vec<_>>();
        assert_eq!(objs(&a), objs(&b));
    }

    #[test]
    fn solver_choice_does_not_change_the_answer() {
        let data = generate_synthetic(200, 5, 3, 12).unwrap();
        let finals: Vec<f64> = [WSolverKind::ClosedForm, WSolverKind::GradientDescent, WSolverKind::Sylvester]
            .into_iter()
            .map(|k| {
                let cfg = FetrConfig {
                    l: 0.01,
                    u: 100.0,
                    w_solver: k,
                    ..FetrConfig::default()
                };
                fit_fetr(&data, &cfg).unwrap().report.final_objective().unwrap()
            })
            .collect();
        for f in &finals[1..] {
            assert!((f - finals[0]).abs() <= 1e-5 * finals[0].abs().max(1.0));
        }
    }

    #[test]
    fn per_task_data_uses_gradient_descent() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let raw = (0..3)
            .map(|i| {
                let n = 20 + 5 * i;
                let x = DMatrix::from_fn(n, 4, |_, _| rng.random_range(0.0..1.0));
                let y = DVector::from_fn(n, |_, _| rng.random_range(-1.0..1.0));
                (x, y)
            })
            .collect();
        let data = validate_dataset(raw).unwrap();
        let model = fit_fetr(&data, &FetrConfig::default()).unwrap();
        assert!(model.report.iterations >= 1);
        let cfg = FetrConfig {
            w_solver: WSolverKind::Sylvester,
            ..FetrConfig::default()
        };
        assert!(matches!(fit_fetr(&data, &cfg), Err(FetrError::UnsupportedShape(_))));
    }
}
