//! Covariance blocks.
//!
//! With `W` and the other precision matrix fixed, each block minimises
//! `tr(Sigma S) - c log|Sigma|` over `l I <= Sigma <= u I`. Writing
//! `S = V diag(nu) V^T`, the minimiser shares the eigenvectors of `S` and
//! takes eigenvalues `clamp(c / nu_i, l, u)`: pairing the eigenvalues of
//! `Sigma` against those of `S` is a minimum-weight perfect matching whose
//! optimum is the sorted-opposite pairing, after which the problem splits
//! into independent scalar problems.
//!
//! The brute-force matching and the iterative oracle below exist to check
//! that closed form independently.

use itertools::Itertools;
use nalgebra::DMatrix;

use crate::error::{FetrError, Result};
use crate::linalg::{self, clamp_snapped, project_bounded_spd, sym_eig};
use crate::types::SpectrumBounds;

/// `tr(Sigma S) - c log|Sigma|`, the log-determinant taken from the
/// eigenvalues of `Sigma`.
pub fn cov_subobjective(sigma: &DMatrix<f64>, s: &DMatrix<f64>, c: f64) -> Result<f64> {
    if sigma.shape() != s.shape() || !sigma.is_square() {
        return Err(FetrError::Dimension(format!(
            "Sigma {:?} and S {:?} must be square and equal in size",
            sigma.shape(),
            s.shape()
        )));
    }
    let log_det = linalg::log_det_spd(sigma)?;
    Ok(sigma.dot(&s.transpose()) - c * log_det)
}

/// Exact minimiser of `tr(Sigma S) - c log|Sigma|` over the spectrum box.
///
/// Eigenvalues `nu_i <= 0` of `S` (rank deficiency, or rounding below zero)
/// send the matching eigenvalue of `Sigma` to `u`.
pub fn minimize_trace_logdet(s: &DMatrix<f64>, c: f64, bounds: &SpectrumBounds) -> Result<DMatrix<f64>> {
    let eig = sym_eig(s)?;
    Ok(eig.map_spectrum(|nu| {
        if nu <= 0.0 {
            bounds.upper()
        } else {
            clamp_snapped(c / nu, bounds)
        }
    }))
}

/// Feature block: minimises over `Sigma1` with `S = W Sigma2 W^T`, `c = m`.
pub fn minimize_sigma1(w: &DMatrix<f64>, sigma2: &DMatrix<f64>, bounds: &SpectrumBounds) -> Result<DMatrix<f64>> {
    if sigma2.shape() != (w.ncols(), w.ncols()) {
        return Err(FetrError::Dimension(format!(
            "Sigma2 is {:?}, W has {} columns",
            sigma2.shape(),
            w.ncols()
        )));
    }
    let s = linalg::symmetrize(&(w * sigma2 * w.transpose()));
    minimize_trace_logdet(&s, w.ncols() as f64, bounds)
}

/// Task block: minimises over `Sigma2` with `S = W^T Sigma1 W`, `c = d`.
pub fn minimize_sigma2(w: &DMatrix<f64>, sigma1: &DMatrix<f64>, bounds: &SpectrumBounds) -> Result<DMatrix<f64>> {
    if sigma1.shape() != (w.nrows(), w.nrows()) {
        return Err(FetrError::Dimension(format!(
            "Sigma1 is {:?}, W has {} rows",
            sigma1.shape(),
            w.nrows()
        )));
    }
    let s = linalg::symmetrize(&(w.transpose() * sigma1 * w));
    minimize_trace_logdet(&s, w.nrows() as f64, bounds)
}

/// Largest size the factorial enumeration accepts.
pub const MAX_BRUTE_FORCE: usize = 8;

/// A perfect matching between `lambda` (descending) and `nu` (ascending):
/// `lambda[i]` is matched to `nu[permutation[i]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingInstance {
    lambda: Vec<f64>,
    nu: Vec<f64>,
    permutation: Vec<usize>,
    weight: f64,
}

impl MatchingInstance {
    pub fn new(lambda: Vec<f64>, nu: Vec<f64>, permutation: Vec<usize>) -> Result<Self> {
        let k = lambda.len();
        if nu.len() != k || permutation.len() != k {
            return Err(FetrError::Dimension(format!(
                "matching sizes differ: lambda {k}, nu {}, permutation {}",
                nu.len(),
                permutation.len()
            )));
        }
        if !lambda.windows(2).all(|w| w[0] >= w[1]) || !nu.windows(2).all(|w| w[0] <= w[1]) {
            return Err(FetrError::Domain(
                "lambda must be descending and nu ascending".into(),
            ));
        }
        if lambda.iter().any(|&x| !(x > 0.0)) || nu.iter().any(|&x| !(x >= 0.0)) {
            return Err(FetrError::Domain(
                "lambda must be positive and nu nonnegative".into(),
            ));
        }
        let mut seen = vec![false; k];
        for &p in &permutation {
            if p >= k || std::mem::replace(&mut seen[p], true) {
                return Err(FetrError::Domain(format!(
                    "{permutation:?} is not a permutation of 0..{k}"
                )));
            }
        }
        let weight = matching_weight(&lambda, &nu, &permutation);
        Ok(MatchingInstance {
            lambda,
            nu,
            permutation,
            weight,
        })
    }

    pub fn lambda(&self) -> &[f64] {
        &self.lambda
    }

    pub fn nu(&self) -> &[f64] {
        &self.nu
    }

    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    pub fn weight(&self) -> f64 {
        self.weight
    }

    pub fn recompute_weight(&self) -> f64 {
        matching_weight(&self.lambda, &self.nu, &self.permutation)
    }

    /// `P` with `P[i][permutation[i]] = 1`, so that `weight = lambda^T P nu`.
    pub fn permutation_matrix(&self) -> DMatrix<f64> {
        let k = self.lambda.len();
        DMatrix::from_fn(k, k, |i, j| if self.permutation[i] == j { 1.0 } else { 0.0 })
    }

    /// Index pairs `i < j` whose edges cross (`permutation[i] > permutation[j]`).
    pub fn inverse_pairs(&self) -> Vec<(usize, usize)> {
        let p = &self.permutation;
        (0..p.len())
            .tuple_combinations()
            .filter(|&(i, j)| p[i] > p[j])
            .collect()
    }

    /// Swaps the partners of `i` and `j`, uncrossing an inverse pair.
    pub fn rematch(&self, i: usize, j: usize) -> Result<MatchingInstance> {
        let k = self.permutation.len();
        if i >= k || j >= k || i == j {
            return Err(FetrError::Domain(format!("cannot rematch ({i}, {j})")));
        }
        let mut permutation = self.permutation.clone();
        permutation.swap(i, j);
        MatchingInstance::new(self.lambda.clone(), self.nu.clone(), permutation)
    }
}

fn matching_weight(lambda: &[f64], nu: &[f64], permutation: &[usize]) -> f64 {
    lambda
        .iter()
        .zip(permutation)
        .map(|(l, &p)| l * nu[p])
        .sum()
}

/// Minimum-weight perfect matching by enumerating all `k!` permutations.
///
/// Inputs are sorted first (lambda descending, nu ascending). Permutations
/// are visited in lexicographic order and replaced only on a strict
/// improvement beyond rounding, so ties resolve to the smallest permutation.
pub fn brute_force_min_matching(lambda: &[f64], nu: &[f64]) -> Result<MatchingInstance> {
    let k = lambda.len();
    if nu.len() != k {
        return Err(FetrError::Dimension(format!(
            "lambda has {k} entries, nu has {}",
            nu.len()
        )));
    }
    if k > MAX_BRUTE_FORCE {
        return Err(FetrError::Capacity(format!(
            "brute-force matching limited to k <= {MAX_BRUTE_FORCE}, got {k}"
        )));
    }
    let mut lambda = lambda.to_vec();
    let mut nu = nu.to_vec();
    lambda.sort_by(|a, b| b.total_cmp(a));
    nu.sort_by(f64::total_cmp);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for perm in (0..k).permutations(k) {
        let w = matching_weight(&lambda, &nu, &perm);
        let better = match &best {
            None => true,
            Some((bw, _)) => w < bw - 1e-12 * bw.abs().max(1.0),
        };
        if better {
            best = Some((w, perm));
        }
    }
    let (_, perm) = best.unwrap_or((0.0, Vec::new()));
    MatchingInstance::new(lambda, nu, perm)
}

/// Largest size the iterative oracle accepts.
pub const MAX_ORACLE_DIM: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleOptions {
    pub max_iters: usize,
    /// First trial step of every backtracking search.
    pub initial_step: f64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        OracleOptions {
            max_iters: 20_000,
            initial_step: 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleResult {
    pub sigma: DMatrix<f64>,
    pub iterations: usize,
    pub objective: f64,
    /// Every iterate satisfied the spectrum bounds.
    pub feasible_throughout: bool,
}

/// Iterative reference solver for `tr(Sigma S) - c log|Sigma|` on the box.
///
/// Projected descent from `(l + u)/2 I` along `Sigma G Sigma`, where
/// `G = S - c Sigma^{-1}` is the Euclidean gradient, with Armijo
/// backtracking on the projected point. The scaling by `Sigma` on both
/// sides keeps the method usable when `u / l` is large; plain fixed-step
/// projected gradient stalls there.
pub fn oracle_cov_minimize(
    s: &DMatrix<f64>,
    c: f64,
    bounds: &SpectrumBounds,
    opts: OracleOptions,
) -> Result<OracleResult> {
    let k = s.nrows();
    if !s.is_square() || k == 0 {
        return Err(FetrError::Dimension(format!("S is {:?}", s.shape())));
    }
    if k > MAX_ORACLE_DIM {
        return Err(FetrError::Capacity(format!(
            "oracle limited to k <= {MAX_ORACLE_DIM}, got {k}"
        )));
    }
    let s = linalg::symmetrize(s);
    let mut sigma = DMatrix::identity(k, k) * (0.5 * (bounds.lower() + bounds.upper()));
    let mut f = cov_subobjective(&sigma, &s, c)?;
    let mut feasible = true;
    let mut iterations = 0;
    while iterations < opts.max_iters {
        iterations += 1;
        let grad = &s - linalg::inverse_spd(&sigma)? * c;
        let direction = linalg::symmetrize(&(&sigma * &grad * &sigma));
        let mut step = opts.initial_step;
        let accepted = loop {
            let trial = project_bounded_spd(&(&sigma - &direction * step), bounds)?;
            let delta = &trial - &sigma;
            let f_trial = cov_subobjective(&trial, &s, c)?;
            if f_trial <= f + 1e-4 * grad.dot(&delta) {
                break Some((trial, f_trial));
            }
            step *= 0.5;
            if step < 1e-20 {
                break None;
            }
        };
        let Some((next, f_next)) = accepted else {
            break;
        };
        feasible &= sym_eig(&next)?.values.iter().all(|&v| bounds.admits(v));
        let done = (f - f_next).abs() <= 1e-16 * (1.0 + f.abs());
        sigma = next;
        f = f_next;
        if done {
            break;
        }
    }
    Ok(OracleResult {
        sigma,
        iterations,
        objective: f,
        feasible_throughout: feasible,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synthetic::{random_feasible_covariance, random_orthogonal};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn diag(v: &[f64]) -> DMatrix<f64> {
        DMatrix::from_diagonal(&DVector::from_column_slice(v))
    }

    fn bounds(l: f64, u: f64) -> SpectrumBounds {
        SpectrumBounds::new(l, u).unwrap()
    }

    #[test]
    fn subobjective_examples() {
        assert_relative_eq!(cov_subobjective(&DMatrix::identity(2, 2), &diag(&[1.0, 2.0]), 2.0).unwrap(), 3.0);
        assert_relative_eq!(
            cov_subobjective(&diag(&[2.0, 2.0]), &DMatrix::zeros(2, 2), 2.0).unwrap(),
            -4.0 * 2f64.ln(),
            epsilon = 1e-14
        );
        assert_relative_eq!(
            cov_subobjective(&diag(&[2.0, 0.5]), &diag(&[1.0, 4.0]), 2.0).unwrap(),
            4.0,
            epsilon = 1e-14
        );
        assert!(matches!(
            cov_subobjective(&diag(&[1.0, -1.0]), &diag(&[1.0, 1.0]), 1.0),
            Err(FetrError::Domain(_))
        ));
    }

    #[test]
    fn sigma1_interior_example() {
        // m = 2 and W Sigma2 W^T = diag(1, 4).
        let w = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        let s1 = minimize_sigma1(&w, &DMatrix::identity(2, 2), &bounds(0.1, 10.0)).unwrap();
        assert!((s1 - diag(&[2.0, 0.5])).norm() < 1e-12);
    }

    #[test]
    fn sigma2_interior_example() {
        // d = 3 and W^T Sigma1 W = diag(1, 3).
        let w = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 3f64.sqrt(), 0.0, 0.0]);
        let s2 = minimize_sigma2(&w, &DMatrix::identity(3, 3), &bounds(0.1, 10.0)).unwrap();
        assert!((s2 - diag(&[3.0, 1.0])).norm() < 1e-12);
    }

    #[test]
    fn zero_weights_push_to_upper_bound() {
        let b = bounds(0.01, 100.0);
        let s1 = minimize_sigma1(&DMatrix::zeros(3, 2), &DMatrix::identity(2, 2), &b).unwrap();
        assert!((s1 - DMatrix::identity(3, 3) * 100.0).norm() < 1e-12);
        let s2 = minimize_sigma2(&DMatrix::zeros(3, 2), &DMatrix::identity(3, 3), &b).unwrap();
        assert!((s2 - DMatrix::identity(2, 2) * 100.0).norm() < 1e-12);
    }

    #[test]
    fn block_dimension_checks() {
        let b = bounds(0.1, 10.0);
        assert!(minimize_sigma1(&DMatrix::zeros(3, 2), &DMatrix::identity(3, 3), &b).is_err());
        assert!(minimize_sigma2(&DMatrix::zeros(3, 2), &DMatrix::identity(2, 2), &b).is_err());
    }

    #[test]
    fn brute_force_examples() {
        let mi = brute_force_min_matching(&[3.0, 2.0, 1.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(mi.permutation(), &[0, 1, 2]);
        assert_relative_eq!(mi.weight(), 10.0);
        let mi = brute_force_min_matching(&[2.5; 3], &[0.3, 7.0, 1.1]).unwrap();
        assert_eq!(mi.permutation(), &[0, 1, 2]);
        let mi = brute_force_min_matching(&[4.0], &[0.25]).unwrap();
        assert_relative_eq!(mi.weight(), 1.0);
        assert!(matches!(
            brute_force_min_matching(&[1.0; 9], &[1.0; 9]),
            Err(FetrError::Capacity(_))
        ));
    }

    #[test]
    fn brute_force_constant_lambda_weights_all_equal() {
        let lambda = [1.7; 4];
        let nu = [0.5, 1.5, 2.0, 3.0];
        let w0 = brute_force_min_matching(&lambda, &nu).unwrap().weight();
        for perm in (0..4).permutations(4) {
            let mi = MatchingInstance::new(lambda.to_vec(), nu.to_vec(), perm).unwrap();
            assert_relative_eq!(mi.weight(), w0, max_relative = 1e-14);
        }
    }

    #[test]
    fn matching_instance_validation() {
        assert!(MatchingInstance::new(vec![2.0, 1.0], vec![0.0, 1.0], vec![1, 1]).is_err());
        assert!(MatchingInstance::new(vec![1.0, 2.0], vec![0.0, 1.0], vec![0, 1]).is_err());
        let mi = MatchingInstance::new(vec![2.0, 1.0], vec![0.0, 1.0], vec![1, 0]).unwrap();
        assert_eq!(mi.inverse_pairs(), vec![(0, 1)]);
        assert_relative_eq!(mi.weight(), mi.recompute_weight());
        let p = mi.permutation_matrix();
        let lam = DVector::from_vec(mi.lambda().to_vec());
        let nu = DVector::from_vec(mi.nu().to_vec());
        assert_relative_eq!(lam.dot(&(p * nu)), mi.weight());
        let fixed = mi.rematch(0, 1).unwrap();
        assert!(fixed.inverse_pairs().is_empty());
        assert!(fixed.weight() <= mi.weight());
    }

    #[test]
    fn doubly_stochastic_relaxation_never_beats_sorted_pairing() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for k in 1..6 {
            let mut lambda: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..5.0)).collect();
            let mut nu: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..5.0)).collect();
            lambda.sort_by(|a, b| b.total_cmp(a));
            nu.sort_by(f64::total_cmp);
            let sorted: f64 = lambda.iter().zip(&nu).map(|(a, b)| a * b).sum();
            for _ in 0..50 {
                let q = random_orthogonal(k, &mut rng);
                let p = q.component_mul(&q);
                let val = DVector::from_vec(lambda.clone()).dot(&(p * DVector::from_vec(nu.clone())));
                assert!(sorted <= val + 1e-12);
            }
        }
    }

    #[test]
    fn oracle_matches_closed_form_examples() {
        let b = bounds(0.1, 10.0);
        let out = oracle_cov_minimize(&diag(&[1.0, 4.0]), 2.0, &b, OracleOptions::default()).unwrap();
        assert!((out.sigma - diag(&[2.0, 0.5])).norm() < 1e-4);
        assert!(out.feasible_throughout);
        let out = oracle_cov_minimize(&DMatrix::zeros(3, 3), 2.0, &b, OracleOptions::default()).unwrap();
        assert!((out.sigma - DMatrix::identity(3, 3) * 10.0).norm() < 1e-6);
        assert!(oracle_cov_minimize(&DMatrix::zeros(7, 7), 1.0, &b, OracleOptions::default()).is_err());
    }

    fn random_block(rng: &mut ChaCha8Rng, d: usize, m: usize, b: &SpectrumBounds) -> (DMatrix<f64>, DMatrix<f64>) {
        let scale = [0.01, 1.0, 10.0][rng.random_range(0..3)];
        let w = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0) * scale);
        (w, random_feasible_covariance(m, b, rng))
    }

    #[test]
    fn closed_form_beats_oracle_and_random_points() {
        let b = bounds(0.01, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..12 {
            let (d, m) = (rng.random_range(1..=5), rng.random_range(1..=5));
            let (w, s2) = random_block(&mut rng, d, m, &b);
            let s = linalg::symmetrize(&(&w * &s2 * w.transpose()));
            let c = m as f64;
            let closed = minimize_sigma1(&w, &s2, &b).unwrap();
            let f_closed = cov_subobjective(&closed, &s, c).unwrap();
            let oracle = oracle_cov_minimize(&s, c, &b, OracleOptions::default()).unwrap();
            assert!(f_closed <= oracle.objective + 1e-6);
            for _ in 0..200 {
                let r = random_feasible_covariance(d, &b, &mut rng);
                assert!(f_closed <= cov_subobjective(&r, &s, c).unwrap() + 1e-9);
            }
        }
    }

    #[test]
    fn stationarity_and_commutation() {
        let b = bounds(1e-3, 1e3);
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let (d, m) = (rng.random_range(1..=4), rng.random_range(4..=7));
            let w = DMatrix::from_fn(d, m, |_, _| rng.random_range(-1.0..1.0));
            let s2 = random_feasible_covariance(m, &bounds(0.5, 2.0), &mut rng);
            let s = &w * &s2 * w.transpose();
            let s1 = minimize_sigma1(&w, &s2, &b).unwrap();
            let comm = &s1 * &s - &s * &s1;
            assert!(comm.norm() <= 1e-8 * (1.0 + s1.norm() * s.norm()));
            let e = sym_eig(&s).unwrap();
            let interior = e.values.iter().all(|&nu| nu > 0.0 && {
                let z = m as f64 / nu;
                z > b.lower() && z < b.upper()
            });
            if interior {
                let prod = &s1 * &s - DMatrix::identity(d, d) * m as f64;
                assert!(prod.norm() <= 1e-8 * m as f64);
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]

            #[test]
            fn sorted_opposite_pairing_is_optimal(seed in any::<u64>(), k in 1usize..=6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let lambda: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..10.0)).collect();
                let nu: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..10.0)).collect();
                let mi = brute_force_min_matching(&lambda, &nu).unwrap();
                let sorted: f64 = mi.lambda().iter().zip(mi.nu()).map(|(a, b)| a * b).sum();
                prop_assert!((mi.weight() - sorted).abs() <= 1e-12 * sorted.max(1.0));
            }

            #[test]
            fn uncrossing_never_increases_weight(seed in any::<u64>(), k in 2usize..=6) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut lambda: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..10.0)).collect();
                let mut nu: Vec<f64> = (0..k).map(|_| rng.random_range(0.0..10.0)).collect();
                lambda.sort_by(|a, b| b.total_cmp(a));
                nu.sort_by(f64::total_cmp);
                let mut perm: Vec<usize> = (0..k).collect();
                for i in (1..k).rev() {
                    perm.swap(i, rng.random_range(0..=i));
                }
                let mi = MatchingInstance::new(lambda, nu, perm).unwrap();
                for (i, j) in mi.inverse_pairs() {
                    let re = mi.rematch(i, j).unwrap();
                    prop_assert!(re.weight() <= mi.weight() + 1e-12 * mi.weight().max(1.0));
                }
            }

            #[test]
            fn block_outputs_are_feasible(seed in any::<u64>(), d in 1usize..=6, m in 1usize..=6) {
                let b = bounds(0.01, 100.0);
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let (w, s2) = random_block(&mut rng, d, m, &b);
                let s1 = minimize_sigma1(&w, &s2, &b).unwrap();
                let s2n = minimize_sigma2(&w, &s1, &b).unwrap();
                prop_assert!(crate::types::CovariancePair::new(s1, s2n, b).is_ok());
            }
        }
    }
}
