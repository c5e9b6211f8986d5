//! Competing optimisers: fudged flip-flop, projected gradient descent on
//! the bounded objective, and independent ridge regressions.

use std::time::Instant;

use nalgebra::DMatrix;

use crate::error::{FetrError, Result};
use crate::linalg::{self, inverse_spd, project_bounded_spd, sym_eig};
use crate::trainer::{mtfrl_objective_unconstrained, FetrModel, Recorder};
use crate::types::{Block, CovariancePair, FetrConfig, MultitaskDataset, WeightMatrix};
use crate::wsolve::{self, GdOptions, NormalEquations};

/// One flip-flop update, centred at zero with a single sample:
/// `Sigma1' = W Sigma2^{-1} W^T / m + eps I`,
/// `Sigma2' = W^T Sigma1^{-1} W / d + eps I`.
///
/// Without the `eps` shift `Sigma1'` has rank at most `min(d, m)`, so the
/// next step fails to invert it whenever `d > m` (and symmetrically).
pub fn flip_flop_step(
    w: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    epsilon: f64,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (d, m) = w.shape();
    if sigma1.shape() != (d, d) || sigma2.shape() != (m, m) {
        return Err(FetrError::Dimension(format!(
            "W is {d}x{m}, Sigma1 {:?}, Sigma2 {:?}",
            sigma1.shape(),
            sigma2.shape()
        )));
    }
    if !(epsilon >= 0.0) {
        return Err(FetrError::InvalidConfig(format!("fudge factor must be >= 0, got {epsilon}")));
    }
    let inv1 = inverse_spd(sigma1)?;
    let inv2 = inverse_spd(sigma2)?;
    let s1 = linalg::symmetrize(&(w * inv2 * w.transpose() / m as f64))
        + DMatrix::identity(d, d) * epsilon;
    let s2 = linalg::symmetrize(&(w.transpose() * inv1 * w / d as f64))
        + DMatrix::identity(m, m) * epsilon;
    Ok((s1, s2))
}

/// Alternates the `W` block (same solver as the main trainer) with a
/// flip-flop covariance step projected back onto the spectrum box.
///
/// No descent guarantee exists, so the trace may rise. If an unprojected
/// step is numerically singular, a `singularity` event is recorded and the
/// fit stops there.
pub fn fit_mtfrl_flipflop(data: &MultitaskDataset, config: &FetrConfig, epsilon: f64) -> Result<FetrModel> {
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

    for it in 1..=config.max_outer_iters {
        if rec.out_of_time() {
            rec.report.events.push(format!("time budget exhausted before iteration {it}"));
            break;
        }
        rec.report.iterations = it;

        let t0 = Instant::now();
        let solved = wsolve::solve_w(config.w_solver, &normal, &covs, config.eta, &w, config.closed_form_max_dim, gd)?;
        w = solved.weights.into_inner();
        rec.report.per_block_seconds.w += t0.elapsed().as_secs_f64();
        let f_w = rec.objective(&w, &covs)?;
        rec.record(it, Block::W, f_w);

        let t0 = Instant::now();
        let (raw1, raw2) = flip_flop_step(&w, covs.sigma1(), covs.sigma2(), epsilon)?;
        let singular = [("Sigma1", &raw1), ("Sigma2", &raw2)]
            .into_iter()
            .map(|(name, s)| sym_eig(s).map(|e| (name, e.min(), e.max())))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .find(|&(_, lo, hi)| lo <= 1e-10 * hi.max(1.0));
        if let Some((name, lo, _)) = singular {
            rec.report.events.push(format!(
                "singularity: flip-flop {name} update at iteration {it} has smallest eigenvalue {lo:e}"
            ));
            break;
        }
        let s1 = project_bounded_spd(&raw1, &bounds)?;
        let s2 = project_bounded_spd(&raw2, &bounds)?;
        covs = CovariancePair::new(s1, s2, bounds)?;
        let dt = t0.elapsed().as_secs_f64();
        rec.report.per_block_seconds.sigma1 += dt / 2.0;
        rec.report.per_block_seconds.sigma2 += dt / 2.0;
        let f_c = rec.objective(&w, &covs)?;
        rec.record(it, Block::Covariances, f_c);

        let done = (prev - f_c).abs() <= config.rel_obj_tol * (1.0 + prev.abs());
        prev = f_c;
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

/// Gradients of the bounded objective in `(W, Sigma1, Sigma2)`.
#[derive(Debug, Clone)]
pub struct JointGradient {
    pub w: DMatrix<f64>,
    pub sigma1: DMatrix<f64>,
    pub sigma2: DMatrix<f64>,
}

/// `grad_W` as in the weight solvers,
/// `grad_Sigma1 = eta (W Sigma2 W^T - m Sigma1^{-1})`,
/// `grad_Sigma2 = eta (W^T Sigma1 W - d Sigma2^{-1})`.
pub fn joint_gradient(
    w: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    normal: &NormalEquations,
    eta: f64,
) -> Result<JointGradient> {
    let (d, m) = w.shape();
    let gw = wsolve::grad_h(w, normal, sigma1, sigma2, eta)?;
    let g1 = (linalg::symmetrize(&(w * sigma2 * w.transpose())) - inverse_spd(sigma1)? * m as f64) * eta;
    let g2 = (linalg::symmetrize(&(w.transpose() * sigma1 * w)) - inverse_spd(sigma2)? * d as f64) * eta;
    Ok(JointGradient {
        w: gw,
        sigma1: g1,
        sigma2: g2,
    })
}

/// Backtracking rule for projected gradient descent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRule {
    /// Trial step at the start of every iteration.
    pub initial_step: f64,
    pub max_halvings: usize,
    pub max_iters: usize,
}

impl Default for StepRule {
    fn default() -> Self {
        StepRule {
            initial_step: 1e-2,
            max_halvings: 30,
            max_iters: 10_000,
        }
    }
}

/// Simultaneous projected gradient steps on all three variables.
///
/// Each iteration starts from `initial_step` and halves until the
/// projected point has a strictly smaller objective; if `max_halvings`
/// halvings do not achieve that, the fit stops (recorded as an event) since
/// the current point is stationary to within the rule's resolution.
pub fn fit_projected_gd(data: &MultitaskDataset, config: &FetrConfig, rule: StepRule) -> Result<FetrModel> {
    config.validate()?;
    if !(rule.initial_step > 0.0) {
        return Err(FetrError::InvalidConfig("initial step must be positive".into()));
    }
    let bounds = config.bounds()?;
    let (d, m) = (data.dim(), data.num_tasks());
    let normal = NormalEquations::new(data)?;
    let mut rec = Recorder::new(data, config.eta, config.time_budget_secs);
    let mut w = DMatrix::zeros(d, m);
    let mut covs = CovariancePair::initial(d, m, bounds);
    let mut f = rec.objective(&w, &covs)?;
    rec.record(0, Block::Init, f);

    for it in 1..=rule.max_iters {
        if rec.out_of_time() {
            rec.report.events.push(format!("time budget exhausted before iteration {it}"));
            break;
        }
        let g = joint_gradient(&w, covs.sigma1(), covs.sigma2(), &normal, config.eta)?;
        let mut step = rule.initial_step;
        let mut accepted = None;
        for _ in 0..=rule.max_halvings {
            let w_t = &w - &g.w * step;
            let s1 = project_bounded_spd(&(covs.sigma1() - &g.sigma1 * step), &bounds)?;
            let s2 = project_bounded_spd(&(covs.sigma2() - &g.sigma2 * step), &bounds)?;
            let c_t = CovariancePair::new(s1, s2, bounds)?;
            let f_t = rec.objective(&w_t, &c_t)?;
            if !f_t.is_finite() {
                return Err(FetrError::Divergence(format!("objective became {f_t} at iteration {it}")));
            }
            if f_t < f {
                accepted = Some((w_t, c_t, f_t));
                break;
            }
            step *= 0.5;
        }
        let Some((w_n, c_n, f_n)) = accepted else {
            rec.report.events.push(format!(
                "line search found no decrease after {} halvings at iteration {it}",
                rule.max_halvings
            ));
            rec.report.converged = true;
            break;
        };
        rec.report.iterations = it;
        let done = (f - f_n).abs() <= config.rel_obj_tol * (1.0 + f.abs());
        w = w_n;
        covs = c_n;
        f = f_n;
        rec.record(it, Block::Joint, f);
        if done {
            rec.report.converged = true;
            break;
        }
    }
    let seconds = rec.elapsed();
    rec.report.per_block_seconds.w = seconds;

    Ok(FetrModel {
        weights: WeightMatrix::new(w)?,
        covariances: covs,
        config: config.clone(),
        report: rec.report,
    })
}

/// Independent ridge regressions `w_i = (X_i^T X_i + lambda I)^{-1} X_i^T y_i`.
pub fn fit_ridge_stl(data: &MultitaskDataset, ridge_lambda: f64) -> Result<WeightMatrix> {
    if !(ridge_lambda >= 0.0 && ridge_lambda.is_finite()) {
        return Err(FetrError::InvalidConfig(format!(
            "ridge lambda must be >= 0, got {ridge_lambda}"
        )));
    }
    let d = data.dim();
    let mut w = DMatrix::zeros(d, data.num_tasks());
    for (i, t) in data.tasks().iter().enumerate() {
        let a = t.x().tr_mul(t.x()) + DMatrix::identity(d, d) * ridge_lambda;
        let b = t.x().tr_mul(t.y());
        let sol = match a.clone().cholesky() {
            Some(ch) => ch.solve(&b),
            None => a
                .lu()
                .solve(&b)
                .ok_or_else(|| FetrError::Singular(format!("ridge system of task {i} is singular")))?,
        };
        if !sol.iter().all(|v| v.is_finite()) {
            return Err(FetrError::Singular(format!("ridge system of task {i} is singular")));
        }
        w.set_column(i, &sol);
    }
    WeightMatrix::new(w)
}

/// The unbounded objective, exposed for finite-difference checks of
/// [`joint_gradient`] at points slightly outside the box.
pub fn objective_at(
    w: &DMatrix<f64>,
    sigma1: &DMatrix<f64>,
    sigma2: &DMatrix<f64>,
    data: &MultitaskDataset,
    eta: f64,
) -> Result<f64> {
    mtfrl_objective_unconstrained(w, sigma1, sigma2, data, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{generate_synthetic, random_feasible_covariance};
    use crate::trainer::{fetr_objective, fit_fetr};
    use crate::types::{validate_dataset, SpectrumBounds};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn flip_flop_collapses_without_fudge() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (s1, s2) = flip_flop_step(&w, &DMatrix::identity(3, 3), &DMatrix::identity(2, 2), 0.0).unwrap();
        assert!(sym_eig(&s1).unwrap().min() <= 1e-10);
        assert!(sym_eig(&s2).unwrap().min() > 0.0);
        assert!(flip_flop_step(&w, &s1, &s2, 0.0).is_err());
    }

    #[test]
    fn flip_flop_fudge_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let w = DMatrix::from_fn(3, 2, |_, _| rng.random_range(-1.0..1.0));
        let (s1, _) = flip_flop_step(&w, &DMatrix::identity(3, 3), &DMatrix::identity(2, 2), 1e-3).unwrap();
        assert!(sym_eig(&s1).unwrap().min() >= 1e-3 - 1e-15);
        let (s1, s2) = flip_flop_step(&DMatrix::zeros(3, 2), &DMatrix::identity(3, 3), &DMatrix::identity(2, 2), 1e-3).unwrap();
        assert_eq!(s1, DMatrix::identity(3, 3) * 1e-3);
        assert_eq!(s2, DMatrix::identity(2, 2) * 1e-3);
    }

    #[test]
    fn flip_flop_fit_on_zero_targets() {
        let x = DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 11) as f64);
        let data = MultitaskDataset::shared(x, &DMatrix::zeros(12, 2)).unwrap();
        let model = fit_mtfrl_flipflop(&data, &FetrConfig::default(), 1e-3).unwrap();
        assert_eq!(model.weights.as_matrix().norm(), 0.0);
        assert!(model.report.objective_trace.iter().all(|p| p.objective.is_finite()));
    }

    #[test]
    fn flip_flop_without_fudge_records_singularity() {
        let data = generate_synthetic(100, 5, 3, 1).unwrap();
        let model = fit_mtfrl_flipflop(&data, &FetrConfig::default(), 0.0).unwrap();
        assert!(model.report.events.iter().any(|e| e.starts_with("singularity")));
    }

    #[test]
    fn flip_flop_does_not_beat_block_descent() {
        let data = generate_synthetic(300, 6, 3, 2).unwrap();
        let cfg = FetrConfig {
            l: 0.01,
            u: 100.0,
            ..FetrConfig::default()
        };
        let fetr = fit_fetr(&data, &cfg).unwrap().report.final_objective().unwrap();
        let ff = fit_mtfrl_flipflop(&data, &cfg, 1e-3).unwrap().report.final_objective().unwrap();
        assert!(ff >= fetr - 1e-6);
    }

    fn central_diff<F: Fn(f64) -> f64>(f: F, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }

    #[test]
    fn joint_gradient_matches_finite_differences() {
        let b = SpectrumBounds::new(0.1, 10.0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        for _ in 0..5 {
            let (d, m) = (rng.random_range(2..5), rng.random_range(2..5));
            let data = generate_synthetic(30, d, m, rng.random()).unwrap();
            let normal = NormalEquations::new(&data).unwrap();
            let w = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0));
            let s1 = random_feasible_covariance(d, &b, &mut rng);
            let s2 = random_feasible_covariance(m, &b, &mut rng);
            let g = joint_gradient(&w, &s1, &s2, &normal, 0.8).unwrap();
            let dir1 = linalg::symmetrize(&DMatrix::from_fn(d, d, |_, _| rng.random_range(-1.0..1.0)));
            let dir2 = linalg::symmetrize(&DMatrix::from_fn(m, m, |_, _| rng.random_range(-1.0..1.0)));
            let fd1 = central_diff(|h| objective_at(&w, &(&s1 + &dir1 * h), &s2, &data, 0.8).unwrap(), 1e-5);
            let fd2 = central_diff(|h| objective_at(&w, &s1, &(&s2 + &dir2 * h), &data, 0.8).unwrap(), 1e-5);
            assert!((fd1 - g.sigma1.dot(&dir1)).abs() <= 1e-5 * fd1.abs().max(1.0));
            assert!((fd2 - g.sigma2.dot(&dir2)).abs() <= 1e-5 * fd2.abs().max(1.0));
        }
    }

    #[test]
    fn projected_gd_descends_and_stays_feasible() {
        let data = generate_synthetic(200, 4, 3, 3).unwrap();
        let cfg = FetrConfig {
            l: 0.01,
            u: 100.0,
            ..FetrConfig::default()
        };
        let rule = StepRule {
            max_iters: 300,
            ..StepRule::default()
        };
        let model = fit_projected_gd(&data, &cfg, rule).unwrap();
        let tr = &model.report.objective_trace;
        assert!(tr.len() > 1);
        assert!(tr.windows(2).all(|p| p[1].objective < p[0].objective));
        let _ = fetr_objective(model.weights.as_matrix(), &model.covariances, &data, cfg.eta).unwrap();
    }

    #[test]
    fn projected_gd_stalls_at_block_descent_solution() {
        let data = generate_synthetic(200, 4, 3, 6).unwrap();
        let cfg = FetrConfig {
            l: 0.01,
            u: 100.0,
            rel_obj_tol: 1e-14,
            max_outer_iters: 20_000,
            ..FetrConfig::default()
        };
        let model = fit_fetr(&data, &cfg).unwrap();
        assert!(model.report.converged);
        let f0 = model.report.final_objective().unwrap();
        let normal = NormalEquations::new(&data).unwrap();
        let (w, s1, s2) = (model.weights.as_matrix(), model.covariances.sigma1(), model.covariances.sigma2());
        let g = joint_gradient(w, s1, s2, &normal, cfg.eta).unwrap();
        let bounds = cfg.bounds().unwrap();
        let mut step = 1e-2;
        for _ in 0..=30 {
            let c = CovariancePair::new(
                project_bounded_spd(&(s1 - &g.sigma1 * step), &bounds).unwrap(),
                project_bounded_spd(&(s2 - &g.sigma2 * step), &bounds).unwrap(),
                bounds,
            )
            .unwrap();
            let f = fetr_objective(&(w - &g.w * step), &c, &data, cfg.eta).unwrap();
            assert!(f >= f0 - 1e-8 * (1.0 + f0.abs()), "step {step}: {f} vs {f0}, iters {} conv {}", model.report.iterations, model.report.converged);
            step *= 0.5;
        }
    }

    #[test]
    fn ridge_examples() {
        let x = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 3.0]);
        let y = DVector::from_vec(vec![1.0, -2.0]);
        let data = validate_dataset(vec![(x.clone(), y.clone())]).unwrap();
        let w = fit_ridge_stl(&data, 0.0).unwrap();
        assert!((&x * w.as_matrix().column(0) - &y).norm() < 1e-12);
        let w = fit_ridge_stl(&data, 1e12).unwrap();
        assert!(w.as_matrix().norm() < 1e-10);
        let rank1 = validate_dataset(vec![(DMatrix::from_element(3, 2, 1.0), DVector::zeros(3))]).unwrap();
        assert!(matches!(fit_ridge_stl(&rank1, 0.0), Err(FetrError::Singular(_))));
    }

    #[test]
    fn ridge_equals_first_weight_block() {
        let data = generate_synthetic(50, 4, 3, 8).unwrap();
        let cfg = FetrConfig {
            eta: 0.3,
            max_outer_iters: 1,
            ..FetrConfig::default()
        };
        let first = fit_fetr(&data, &cfg).unwrap();
        let ridge = fit_ridge_stl(&data, 0.3).unwrap();
        assert_relative_eq!(first.weights.as_matrix(), ridge.as_matrix(), max_relative = 1e-9, epsilon = 1e-12);
    }
}
