//! Random Fourier features for the Gaussian kernel
//! `k(x, y) = exp(-||x - y||^2 / (2 bandwidth^2))`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};

use crate::data::synthetic::random_orthogonal;
use crate::error::{FetrError, Result};
use crate::types::MultitaskDataset;

pub const DEFAULT_BANDWIDTH: f64 = 1.0;

/// `z(x) = sqrt(2/p) cos(Omega^T x + b)` with `Omega` stored `d x p`.
#[derive(Debug, Clone, PartialEq)]
pub struct RffMap {
    pub omega: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl RffMap {
    /// Draws `Omega ~ N(0, bandwidth^-2 I)` and `b ~ U[0, 2 pi)`.
    ///
    /// With `orthogonal`, `Omega` is built from `d x d` blocks of a random
    /// orthogonal matrix whose columns are rescaled by independent chi(d)
    /// norms, so each column keeps the Gaussian marginal while columns in a
    /// block are exactly orthogonal.
    pub fn sample(d: usize, p: usize, bandwidth: f64, seed: u64, orthogonal: bool) -> Result<Self> {
        check_params(d, p, bandwidth)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let omega = if orthogonal {
            let chi = ChiSquared::new(d as f64).expect("d >= 1");
            let mut omega = DMatrix::zeros(d, p);
            let mut filled = 0;
            while filled < p {
                let q = random_orthogonal(d, &mut rng);
                let take = d.min(p - filled);
                for j in 0..take {
                    let norm = chi.sample(&mut rng).sqrt();
                    omega.set_column(filled + j, &(q.column(j) * (norm / bandwidth)));
                }
                filled += take;
            }
            omega
        } else {
            DMatrix::from_fn(d, p, |_, _| rng.sample::<f64, _>(StandardNormal) / bandwidth)
        };
        let b = DVector::from_fn(p, |_, _| rng.random_range(0.0..std::f64::consts::TAU));
        Ok(RffMap { omega, b })
    }

    pub fn input_dim(&self) -> usize {
        self.omega.nrows()
    }

    pub fn output_dim(&self) -> usize {
        self.omega.ncols()
    }

    /// Maps every row of `x`.
    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.input_dim() {
            return Err(FetrError::Dimension(format!(
                "features have {} columns, map expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        let scale = (2.0 / self.output_dim() as f64).sqrt();
        let mut z = x * &self.omega;
        for (j, mut col) in z.column_iter_mut().enumerate() {
            let bj = self.b[j];
            col.apply(|v| *v = scale * (*v + bj).cos());
        }
        Ok(z)
    }
}

fn check_params(d: usize, p: usize, bandwidth: f64) -> Result<()> {
    if d == 0 {
        return Err(FetrError::EmptyData("zero-dimensional features".into()));
    }
    if p == 0 || !p.is_multiple_of(2) {
        return Err(FetrError::InvalidConfig(format!("feature count must be even and positive, got {p}")));
    }
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(FetrError::InvalidConfig(format!("bandwidth must be positive, got {bandwidth}")));
    }
    Ok(())
}

/// Replaces every design matrix by its `p` random features.
pub fn rff_transform(data: &MultitaskDataset, p: usize, bandwidth: f64, seed: u64, orthogonal: bool) -> Result<MultitaskDataset> {
    let map = RffMap::sample(data.dim(), p, bandwidth, seed, orthogonal)?;
    rff_transform_with(data, &map)
}

pub fn rff_transform_with(data: &MultitaskDataset, map: &RffMap) -> Result<MultitaskDataset> {
    if data.dim() != map.input_dim() {
        return Err(FetrError::Dimension(format!(
            "data has d = {}, map expects {}",
            data.dim(),
            map.input_dim()
        )));
    }
    data.map_features(|x| map.apply(x).expect("dimension checked"))
}

pub fn rbf_kernel(x: &DVector<f64>, y: &DVector<f64>, bandwidth: f64) -> f64 {
    (-(x - y).norm_squared() / (2.0 * bandwidth * bandwidth)).exp()
}
