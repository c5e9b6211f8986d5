//! Drivers behind the command-line tools: cross-validation over an `eta`
//! grid, weight-solver timing, and the optimiser comparison.

use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::baselines::{fit_mtfrl_flipflop, fit_projected_gd, StepRule};
use crate::data::split::kfold_split;
use crate::data::synthetic::{generate_synthetic, random_feasible_covariance};
use crate::error::{FetrError, Result};
use crate::trainer::{evaluate, fit_fetr, FetrModel, MetricKind};
use crate::types::{CovariancePair, FetrConfig, MultitaskDataset, TracePoint, WSolverKind};
use crate::wsolve::{self, step_schedule_for, GdOptions, NormalEquations};

/// Parses `a..b` (every decade from `a` to `b`, both powers of ten) or a
/// comma-separated list.
pub fn parse_eta_grid(spec: &str) -> Result<Vec<f64>> {
    let bad = |msg: String| FetrError::InvalidConfig(format!("eta grid '{spec}': {msg}"));
    let num = |s: &str| -> Result<f64> {
        let v: f64 = s.trim().parse().map_err(|_| bad(format!("'{s}' is not a number")))?;
        if v > 0.0 && v.is_finite() {
            Ok(v)
        } else {
            Err(bad(format!("{v} is not positive")))
        }
    };
    let grid = if let Some((lo, hi)) = spec.split_once("..") {
        let (lo, hi) = (num(lo)?.log10(), num(hi)?.log10());
        let (a, b) = (lo.round(), hi.round());
        if (lo - a).abs() > 1e-9 || (hi - b).abs() > 1e-9 || a > b {
            return Err(bad("range ends must be increasing powers of ten".into()));
        }
        (a as i32..=b as i32).map(|k| 10f64.powi(k)).collect()
    } else {
        spec.split(',').map(num).collect::<Result<Vec<_>>>()?
    };
    if grid.is_empty() {
        return Err(bad("empty".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvCell {
    pub eta: f64,
    pub fold_scores: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CvResult {
    pub metric: MetricKind,
    pub folds: usize,
    pub seed: u64,
    pub cells: Vec<CvCell>,
    pub best_eta: f64,
    pub best_mean: f64,
    pub best_std: f64,
}

/// k-fold cross-validation of the aggregate metric for every `eta` in the
/// grid; the smallest mean wins (ties go to the smaller `eta`).
pub fn cross_validate(
    data: &MultitaskDataset,
    base: &FetrConfig,
    folds: usize,
    eta_grid: &[f64],
    metric: MetricKind,
    seed: u64,
) -> Result<CvResult> {
    if eta_grid.is_empty() {
        return Err(FetrError::InvalidConfig("empty eta grid".into()));
    }
    let splits = kfold_split(data, folds, seed)?;
    let mut cells = Vec::with_capacity(eta_grid.len());
    for &eta in eta_grid {
        let cfg = FetrConfig { eta, ..base.clone() };
        let fold_scores = splits
            .iter()
            .map(|f| {
                let model = fit_fetr(&f.train, &cfg)?;
                Ok(evaluate(model.weights.as_matrix(), &f.test, metric)?.aggregate)
            })
            .collect::<Result<Vec<f64>>>()?;
        let (mean, std) = mean_std(&fold_scores);
        cells.push(CvCell {
            eta,
            fold_scores,
            mean,
            std,
        });
    }
    let best = cells
        .iter()
        .fold(None::<&CvCell>, |b, c| match b {
            Some(b) if b.mean <= c.mean => Some(b),
            _ => Some(c),
        })
        .expect("grid is non-empty");
    Ok(CvResult {
        metric,
        folds,
        seed,
        best_eta: best.eta,
        best_mean: best.mean,
        best_std: best.std,
        cells,
    })
}

/// Mean and sample standard deviation (zero for a single value).
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BenchStatus {
    Ok,
    /// The solver refused the problem size.
    Capacity,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchCell {
    pub d: usize,
    pub m: usize,
    pub solver: WSolverKind,
    pub status: BenchStatus,
    pub samples: Vec<f64>,
    pub mean_seconds: f64,
    /// Population variance of the samples.
    pub var_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchPoint {
    pub d: usize,
    pub m: usize,
    pub cells: Vec<BenchCell>,
    /// Largest pairwise relative Frobenius difference between solutions.
    pub max_rel_diff: f64,
    pub agree: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub n: usize,
    pub grid: Vec<(usize, usize)>,
    pub repeats: usize,
    pub seed: u64,
    pub eta: f64,
    pub l: f64,
    pub u: f64,
    pub closed_form_max_dim: usize,
    pub gd: GdOptions,
}

/// Cross-solver agreement required at every benchmark point.
pub const AGREEMENT_TOL: f64 = 1e-6;

/// Times the three weight solvers on synthetic data with random feasible
/// covariances. Normal equations are formed once per point, outside the
/// timed region; each solver gets one untimed warm-up call.
pub fn bench_wsolvers(opts: &BenchOptions) -> Result<Vec<BenchPoint>> {
    if opts.repeats == 0 {
        return Err(FetrError::InvalidConfig("repeats must be at least 1".into()));
    }
    let bounds = crate::types::SpectrumBounds::new(opts.l, opts.u)?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut points = Vec::with_capacity(opts.grid.len());
    for (idx, &(d, m)) in opts.grid.iter().enumerate() {
        let data = generate_synthetic(opts.n, d, m, opts.seed.wrapping_add(idx as u64))?;
        let normal = NormalEquations::new(&data)?;
        let covs = CovariancePair::new(
            random_feasible_covariance(d, &bounds, &mut rng),
            random_feasible_covariance(m, &bounds, &mut rng),
            bounds,
        )?;
        let (s1, s2) = (covs.sigma1(), covs.sigma2());
        let w0 = DMatrix::zeros(d, m);
        let schedule = step_schedule_for(&normal, opts.eta, s1, s2)?;

        let mut cells = Vec::new();
        let mut solutions: Vec<DMatrix<f64>> = Vec::new();
        for solver in [WSolverKind::ClosedForm, WSolverKind::GradientDescent, WSolverKind::Sylvester] {
            let run = || -> Result<DMatrix<f64>> {
                Ok(match solver {
                    WSolverKind::ClosedForm => wsolve::solve_w_closed(&normal, s1, s2, opts.eta, opts.closed_form_max_dim)?,
                    WSolverKind::Sylvester => wsolve::solve_w_sylvester(&normal, s1, s2, opts.eta)?,
                    _ => wsolve::solve_w_gd(&normal, s1, s2, opts.eta, &schedule, &w0, opts.gd)?.weights,
                }
                .into_inner())
            };
            let warm = match run() {
                Err(FetrError::Capacity(_)) => {
                    cells.push(BenchCell {
                        d,
                        m,
                        solver,
                        status: BenchStatus::Capacity,
                        samples: Vec::new(),
                        mean_seconds: f64::NAN,
                        var_seconds: f64::NAN,
                    });
                    continue;
                }
                other => other?,
            };
            let samples = (0..opts.repeats)
                .map(|_| {
                    let t = Instant::now();
                    run().map(|_| t.elapsed().as_secs_f64())
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = samples.iter().sum::<f64>() / samples.len() as f64;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / samples.len() as f64;
            solutions.push(warm);
            cells.push(BenchCell {
                d,
                m,
                solver,
                status: BenchStatus::Ok,
                samples,
                mean_seconds: mean,
                var_seconds: var,
            });
        }
        let mut max_rel_diff: f64 = 0.0;
        for (i, a) in solutions.iter().enumerate() {
            for b in &solutions[i + 1..] {
                max_rel_diff = max_rel_diff.max((a - b).norm() / a.norm().max(b.norm()).max(f64::MIN_POSITIVE));
            }
        }
        points.push(BenchPoint {
            d,
            m,
            cells,
            max_rel_diff,
            agree: max_rel_diff <= AGREEMENT_TOL,
        });
    }
    Ok(points)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MethodRun {
    pub name: String,
    pub trace: Vec<TracePoint>,
    pub final_objective: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub seconds: f64,
    pub events: Vec<String>,
    /// First trace point within the target, if any.
    pub evals_to_target: Option<usize>,
    pub seconds_to_target: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareResult {
    pub budget_seconds: f64,
    pub eta: f64,
    pub l: f64,
    pub u: f64,
    pub fudge: f64,
    /// Within `TARGET_REL_GAP` (relative) of the block-descent final objective.
    pub target: f64,
    pub best_final: f64,
    pub methods: Vec<MethodRun>,
}

pub const TARGET_REL_GAP: f64 = 1e-4;

/// Objective tolerance used for all three methods in a comparison run.
pub const COMPARE_REL_TOL: f64 = 1e-12;

/// Runs block coordinate descent, projected gradient descent and fudged
/// flip-flop, each under `budget_seconds` of wall clock.
pub fn compare(data: &MultitaskDataset, base: &FetrConfig, budget_seconds: f64, fudge: f64) -> Result<CompareResult> {
    if !(budget_seconds > 0.0) {
        return Err(FetrError::InvalidConfig(format!("budget must be positive, got {budget_seconds}")));
    }
    let cfg = FetrConfig {
        rel_obj_tol: COMPARE_REL_TOL,
        max_outer_iters: usize::MAX,
        time_budget_secs: Some(budget_seconds),
        ..base.clone()
    };
    let runs: Vec<(&str, FetrModel)> = vec![
        ("fetr", fit_fetr(data, &cfg)?),
        (
            "projected_gd",
            fit_projected_gd(
                data,
                &cfg,
                StepRule {
                    max_iters: usize::MAX,
                    ..StepRule::default()
                },
            )?,
        ),
        ("flipflop", fit_mtfrl_flipflop(data, &cfg, fudge)?),
    ];
    let fetr_final = runs[0].1.report.final_objective().expect("trace has an initial point");
    let target = fetr_final + TARGET_REL_GAP * fetr_final.abs().max(1.0);
    let methods: Vec<MethodRun> = runs
        .into_iter()
        .map(|(name, model)| {
            let r = model.report;
            let hit = r.objective_trace.iter().find(|p| p.objective <= target);
            MethodRun {
                name: name.to_string(),
                final_objective: r.final_objective().expect("trace has an initial point"),
                iterations: r.iterations,
                evaluations: r.objective_evaluations,
                seconds: r.objective_trace.last().map_or(0.0, |p| p.seconds),
                evals_to_target: hit.map(|p| p.evaluations),
                seconds_to_target: hit.map(|p| p.seconds),
                events: r.events,
                trace: r.objective_trace,
            }
        })
        .collect();
    let best_final = methods.iter().map(|m| m.final_objective).fold(f64::INFINITY, f64::min);
    Ok(CompareResult {
        budget_seconds,
        eta: cfg.eta,
        l: cfg.l,
        u: cfg.u,
        fudge,
        target,
        best_final,
        methods,
    })
}

/// `log10(f - f_best + floor)`, the plotting axis for comparison traces;
/// `floor` keeps the final point of the best method finite.
pub fn log10_gap(objective: f64, best_final: f64) -> f64 {
    let floor = 1e-12 * best_final.abs().max(1.0);
    ((objective - best_final).max(0.0) + floor).log10()
}

/// Plot-ready trace rows: `iteration,block,seconds,evaluations,objective,log10_gap`.
pub fn compare_trace_rows(run: &MethodRun, best_final: f64) -> Vec<String> {
    run.trace
        .iter()
        .map(|p| {
            format!(
                "{},{},{:.9},{},{:.16e},{:.6}",
                p.iteration,
                p.block,
                p.seconds,
                p.evaluations,
                p.objective,
                log10_gap(p.objective, best_final)
            )
        })
        .collect()
}

pub const COMPARE_TRACE_HEADER: &str = "iteration,block,seconds,evaluations,objective,log10_gap";
